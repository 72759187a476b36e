"""Sample/Dataset validation, manifest IO, label unification, PK batching."""

import numpy as np
import pytest

from hardreid.data import (
    UNKNOWN,
    BatchSpec,
    Dataset,
    Sample,
    label_arrays,
    load_manifest,
    merge,
    read_raw_labels_csv,
    sample_batch_pk,
    stack_features,
    unify_labels,
    write_manifest,
)
from hardreid.errors import ConfigError, ContractError, ParseError, ValidationError

from conftest import make_sample


# ---------------------------------------------------------------- samples

def test_sample_basic_fields():
    s = make_sample("a", 3, 2, 1, features=[1.0, 2.0])
    assert s.identity == 3 and s.clothing == 2 and s.viewpoint == 1
    assert s.features.dtype == np.float64
    assert not s.features.flags.writeable


@pytest.mark.parametrize("field,value", [
    ("identity", 0),
    ("identity", -2),
    ("clothing", 0),
    ("viewpoint", -5),
])
def test_sample_rejects_bad_labels(field, value):
    kwargs = dict(identity=1, clothing=1, viewpoint=1)
    kwargs[field] = value
    with pytest.raises(ValidationError):
        make_sample("a", **kwargs)


def test_sample_unknown_labels_allowed():
    s = make_sample("a", 1, UNKNOWN, UNKNOWN, origin="coarse_generated")
    assert s.clothing == UNKNOWN and s.viewpoint == UNKNOWN


def test_fine_origin_requires_known_clothing():
    with pytest.raises(ValidationError):
        make_sample("a", 1, UNKNOWN, 1, origin="fine_generated")


def test_coarse_origin_requires_unknown_clothing():
    with pytest.raises(ValidationError):
        make_sample("a", 1, 2, 1, origin="coarse_generated")


def test_sample_needs_exactly_one_payload():
    with pytest.raises(ValidationError):
        Sample(sample_id="a", identity=1, clothing=1, viewpoint=1,
               split="train", origin="real")
    with pytest.raises(ValidationError):
        Sample(sample_id="a", identity=1, clothing=1, viewpoint=1,
               split="train", origin="real",
               features=np.zeros(2), image_ref="a.pgm")


def test_sample_rejects_non_finite_features():
    with pytest.raises(ValidationError):
        make_sample("a", 1, 1, 1, features=[1.0, np.nan])


def test_with_split_returns_new_sample():
    s = make_sample("a", 1, 1, 1)
    q = s.with_split("query")
    assert q.split == "query" and s.split == "train"
    np.testing.assert_array_equal(q.features, s.features)


# ---------------------------------------------------------------- dataset

def test_dataset_duplicate_id_names_offender():
    samples = [make_sample("a", 1, 1, 1), make_sample("a", 2, 1, 1)]
    with pytest.raises(ValidationError, match="a"):
        Dataset.from_samples(samples)


def test_dataset_mixed_dims_names_offender():
    samples = [
        make_sample("a", 1, 1, 1, features=[1.0, 2.0]),
        make_sample("b", 1, 1, 1, features=[1.0, 2.0, 3.0]),
    ]
    with pytest.raises(ValidationError, match="b"):
        Dataset.from_samples(samples)


def test_identity_codes_are_dense_and_sorted():
    ds = Dataset.from_samples([
        make_sample("a", 7, 1, 1),
        make_sample("b", 3, 1, 1),
        make_sample("c", 7, 2, 1),
    ])
    assert ds.identities() == [3, 7]
    assert ds.identity_codes() == {3: 0, 7: 1}


def test_merge_rejects_shared_ids():
    d1 = Dataset.from_samples([make_sample("a", 1, 1, 1)])
    d2 = Dataset.from_samples([make_sample("a", 2, 1, 1)])
    with pytest.raises(ValidationError):
        merge(d1, d2)


def test_stack_and_labels_roundtrip():
    batch = [make_sample("a", 1, 2, 1), make_sample("b", 4, UNKNOWN, 2)]
    feats = stack_features(batch)
    assert feats.shape == (2, 4)
    y, c, v = label_arrays(batch)
    np.testing.assert_array_equal(y, [1, 4])
    np.testing.assert_array_equal(c, [2, UNKNOWN])
    np.testing.assert_array_equal(v, [1, 2])


# ---------------------------------------------------------------- manifests

def test_manifest_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(7)
    ds = Dataset.from_samples([
        make_sample("a", 1, 1, 1, features=rng.normal(size=3)),
        make_sample("b", 2, UNKNOWN, UNKNOWN, origin="coarse_generated",
                    features=rng.normal(size=3)),
    ])
    path = tmp_path / "m.jsonl"
    write_manifest(ds, path)
    back = load_manifest(path)
    assert len(back) == 2
    for orig, read in zip(ds.samples, back.samples):
        assert orig.sample_id == read.sample_id
        assert (orig.identity, orig.clothing, orig.viewpoint) == \
               (read.identity, read.clothing, read.viewpoint)
        # repr-formatted floats must survive the trip bit for bit
        np.testing.assert_array_equal(orig.features, read.features)


def test_manifest_malformed_line_reports_lineno(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"sample_id": "a"}\nnot json\n')
    with pytest.raises(ParseError, match=":1"):
        load_manifest(path)


def test_manifest_duplicate_id(tmp_path):
    ds = Dataset.from_samples([make_sample("a", 1, 1, 1)])
    path = tmp_path / "m.jsonl"
    write_manifest(ds, path)
    line = path.read_text()
    path.write_text(line + line)
    with pytest.raises(ValidationError, match="a"):
        load_manifest(path)


# ---------------------------------------------------------------- raw labels

def test_unify_per_identity_tag():
    got = unify_labels([(5, "indoor", "camA"), (5, "outdoor", "camB")],
                       "per_identity_tag")
    (c1, v1), (c2, v2) = got
    assert c1 != c2 and v1 != v2


def test_unify_global_tag_shares_garments():
    got = unify_labels([(1, "g7", "c1"), (2, "g7", "c2")], "global_tag")
    assert got[0][0] == got[1][0]
    # per-identity scheme keeps the same tag distinct across identities
    got = unify_labels([(1, "g7", "c1"), (2, "g7", "c2")], "per_identity_tag")
    assert got[0][0] != got[1][0]


def test_unify_is_deterministic_for_repeats():
    got = unify_labels([(1, "x", "c1"), (1, "x", "c1")], "global_tag")
    assert got[0] == got[1]


def test_unify_rejects_empty_tag_and_bad_scheme():
    with pytest.raises(ValidationError):
        unify_labels([(1, "", "c1")], "global_tag")
    with pytest.raises(ConfigError):
        unify_labels([(1, "x", "c1")], "nope")


def test_read_raw_labels_csv(tmp_path):
    path = tmp_path / "raw.csv"
    path.write_text(
        "identity,raw_clothes_tag,raw_camera_tag,scheme\n"
        "1,g7,c1,global_tag\n"
        "2,g7,c2,global_tag\n"
    )
    rows, scheme = read_raw_labels_csv(path)
    assert scheme == "global_tag"
    assert unify_labels(rows, scheme)[0][0] == unify_labels(rows, scheme)[1][0]


def test_read_raw_labels_rejects_mixed_schemes(tmp_path):
    path = tmp_path / "raw.csv"
    path.write_text(
        "identity,raw_clothes_tag,raw_camera_tag,scheme\n"
        "1,a,c1,global_tag\n"
        "2,b,c2,per_identity_tag\n"
    )
    with pytest.raises(ValidationError):
        read_raw_labels_csv(path)


# ---------------------------------------------------------------- PK batches

def _pk_dataset(num_ids=3, per_id=3):
    samples = []
    for y in range(1, num_ids + 1):
        for j in range(per_id):
            samples.append(make_sample(f"s{y}-{j}", y, 1, 1))
    return Dataset.from_samples(samples)


def test_pk_batch_shape_and_coverage():
    ds = _pk_dataset(num_ids=3, per_id=3)
    spec = BatchSpec(p=2, k=2, seed=0)
    batch = sample_batch_pk(ds, spec, step=0)
    assert len(batch) == 4
    assert len({s.identity for s in batch}) == 2


def test_pk_batch_replacement_for_small_identity():
    samples = [make_sample("only", 1, 1, 1)] + \
        [make_sample(f"b{j}", 2, 1, 1) for j in range(3)]
    ds = Dataset.from_samples(samples)
    batch = sample_batch_pk(ds, BatchSpec(p=2, k=2, seed=0), step=0)
    ids = [s.sample_id for s in batch if s.identity == 1]
    assert ids == ["only", "only"]


def test_pk_batch_deterministic_in_seed_and_step():
    ds = _pk_dataset(num_ids=5, per_id=4)
    spec = BatchSpec(p=3, k=2, seed=9)
    b1 = [s.sample_id for s in sample_batch_pk(ds, spec, step=11)]
    b2 = [s.sample_id for s in sample_batch_pk(ds, spec, step=11)]
    b3 = [s.sample_id for s in sample_batch_pk(ds, spec, step=12)]
    assert b1 == b2
    assert b1 != b3


def test_pk_batch_uses_train_split_only():
    samples = [make_sample(f"t{j}", 1 + j % 2, 1, 1) for j in range(4)]
    samples.append(make_sample("q", 3, 1, 1, split="query"))
    ds = Dataset.from_samples(samples)
    for step in range(5):
        batch = sample_batch_pk(ds, BatchSpec(p=2, k=2), step)
        assert all(s.split == "train" for s in batch)


def test_pk_batch_errors():
    ds = _pk_dataset(num_ids=2)
    with pytest.raises(ConfigError):
        sample_batch_pk(ds, BatchSpec(p=4, k=2), 0)
    with pytest.raises(ContractError):
        sample_batch_pk(ds, BatchSpec(p=2, k=2), -1)
    with pytest.raises(ConfigError):
        BatchSpec(p=1, k=2)
