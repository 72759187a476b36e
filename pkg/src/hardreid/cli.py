"""Command-line entry point wiring the modules into reproducible runs.

Every subcommand writes its outputs under --out plus a run_manifest.json
recording what ran, with what config, seed and kernel backend, and whether
it succeeded.
On failure the partially written outputs are removed (the manifest stays)
and the exit code encodes the failure class: 2 config, 3 data, 4 numeric.
"""

import argparse
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, analyzer, curation, experiments, kernels
from .data import load_manifest, merge, write_manifest
from .errors import ConfigError, DataError, HardReidError, NumericError
from .evaluation import EvalProtocol, write_per_query_ap, write_report
from .model import NetConfig, init_params, load_checkpoint, save_checkpoint
from .scenario import ScenarioConfig, generate_scenario
from .train import TrainConfig, fit, pretrain_coarse, write_train_log, write_train_metrics


class _Run:
    """Tracks files a command creates so failures can clean them up."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.created = []

    def path(self, name):
        p = self.out_dir / name
        self.created.append(p)
        return p

    def remove_outputs(self):
        for p in self.created:
            try:
                p.unlink()
            except FileNotFoundError:
                pass


def _now():
    return datetime.now(timezone.utc).isoformat()


def _ints(text):
    return [int(v) for v in text.split(",") if v != ""]


def _floats(text):
    return [float(v) for v in text.split(",") if v != ""]


def _load_scenario_config(args):
    cfg = ScenarioConfig.from_file(args.scenario) if args.scenario else ScenarioConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _load_train_config(args):
    cfg = TrainConfig.from_file(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = {}
    for name in ("seed", "epochs", "alpha", "lam", "margin", "mining", "pretrain_epochs"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "hsal", None) is not None:
        overrides["hsal_enabled"] = args.hsal == "on"
    return replace(cfg, **overrides) if overrides else cfg


def cmd_synth(args, run):
    cfg = _load_scenario_config(args)
    generated = generate_scenario(cfg)
    write_manifest(generated.base, run.path("base.jsonl"))
    write_manifest(generated.coarse, run.path("coarse.jsonl"))
    write_manifest(generated.fine, run.path("fine.jsonl"))
    with open(run.path("provenance.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "scenario": cfg.to_dict(),
                "excluded_identities": list(generated.excluded_identities),
            },
            fh,
            indent=2,
        )
        fh.write("\n")


def cmd_curate(args, run):
    dataset = load_manifest(args.manifest)
    records = {r.sample_id: r for r in curation.read_keypoints(args.keypoints)}
    thresholds = curation.PoseThresholds(
        vis_min=args.vis_min,
        eps_y=args.eps_y,
        eps_v=args.eps_v,
        min_interocular=args.min_interocular,
    )
    image_root = Path(args.images) if args.images else Path(args.manifest).parent
    subjects = [s for s in dataset.samples if s.image_ref is not None]
    if not subjects:
        raise DataError(f"{args.manifest}: no samples with image references to curate")
    poses = []
    qualities = []
    for s in subjects:
        rec = records.get(s.sample_id)
        if rec is None:
            raise DataError(f"no keypoints for sample {s.sample_id!r} in {args.keypoints}")
        poses.append(curation.detect_frontal_pose(rec, thresholds))
        qualities.append(curation.assess_quality(curation.read_pgm(image_root / s.image_ref)))
    qualities = curation.score_corpus(qualities)
    candidates = [
        curation.Candidate(
            sample_id=s.sample_id,
            pose_pass=passed,
            pose_score=score,
            quality=q,
            identity=s.identity,
        )
        for s, (passed, score), q in zip(subjects, poses, qualities)
    ]
    with open(run.path("scores.csv"), "w", encoding="utf-8") as fh:
        fh.write("sample_id,identity,pose_pass,pose_score,resolution,sharpness,composite\n")
        for c in candidates:
            fh.write(
                f"{c.sample_id},{c.identity},{int(c.pose_pass)},{repr(c.pose_score)},"
                f"{c.quality.resolution},{repr(c.quality.sharpness)},{repr(c.quality.composite)}\n"
            )
    selection = {
        "global_top_m": curation.select_top(candidates, args.top_m, "global_top_m"),
        "per_identity_top_n": curation.select_top(candidates, args.top_n, "per_identity_top_n"),
    }
    with open(run.path("selection.json"), "w", encoding="utf-8") as fh:
        json.dump(selection, fh, indent=2)
        fh.write("\n")


def cmd_plan(args, run):
    plan = curation.plan_generation(
        args.num_identities, args.library_garments, args.anchors, args.photos
    )
    doc = curation.plan_to_dict(plan)
    with open(run.path("plan.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    print(json.dumps({"n_hp": plan.n_hp, "n_hn": plan.n_hn}))


def cmd_train(args, run):
    cfg = _load_train_config(args)
    base = load_manifest(args.manifest)
    train_set = base.restrict(lambda s: s.split == "train")
    if args.fine:
        fine = load_manifest(args.fine).restrict(lambda s: s.split == "train")
        train_set = merge(train_set, fine)
    if train_set.feature_dim is None:
        raise DataError("training manifests carry no feature vectors")
    net_cfg = NetConfig(
        input_dim=train_set.feature_dim,
        hidden_dims=tuple(args.hidden_dims),
        embed_dim=args.embed_dim,
        num_classes=len(train_set.identities()),
        init_seed=cfg.seed,
    )
    params = init_params(net_cfg)
    if args.coarse:
        coarse = load_manifest(args.coarse).restrict(lambda s: s.split == "train")
        pre_rows = []
        params = pretrain_coarse(params, coarse, cfg, collect=pre_rows)
        if pre_rows:
            write_train_log(pre_rows, run.path("pretrain_log.csv"))
            write_train_metrics(pre_rows, run.path("pretrain_metrics.csv"))
        save_checkpoint(params, run.path("checkpoint_pretrain.json"))
    params, rows = fit(params, train_set, cfg)
    write_train_log(rows, run.path("train_log.csv"))
    write_train_metrics(rows, run.path("train_metrics.csv"))
    save_checkpoint(params, run.path("checkpoint.json"))
    with open(run.path("train_config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")


def cmd_eval(args, run):
    params = load_checkpoint(args.checkpoint)
    pool = load_manifest(args.manifest).restrict(lambda s: s.split in ("query", "gallery"))
    protocol = EvalProtocol(mode=args.mode, exclude_same_camera=not args.include_same_camera)
    report = experiments.evaluate_params(params, pool, protocol)
    write_report(report, run.path("report.json"))
    write_per_query_ap(report, run.path("per_query_ap.csv"))


def cmd_ablate(args, run):
    scenario_cfg = _load_scenario_config(args)
    train_cfg = _load_train_config(args)
    result = experiments.run_ablation(scenario_cfg, train_cfg, seeds=tuple(args.seeds))
    experiments.write_ablation_csv(result, run.path("ablation.csv"))
    experiments.write_ablation_details_csv(result, run.path("ablation_details.csv"))


def cmd_sweep(args, run):
    scenario_cfg = _load_scenario_config(args)
    train_cfg = _load_train_config(args)
    result = experiments.run_sweep(
        scenario_cfg, train_cfg, alphas=tuple(args.alphas), lambdas=tuple(args.lambdas)
    )
    experiments.write_sweep_csv(result, run.path("sweep.csv"), field="rank1")
    experiments.write_sweep_csv(result, run.path("sweep_map.csv"), field="map_score")
    for (alpha, lam), cell in result.cells.items():
        name = f"cell_alpha{alpha}_lambda{lam}_metrics.csv"
        write_train_metrics(cell.rows, run.path(name))


def cmd_analyze(args, run):
    dataset = load_manifest(args.manifest)
    batch = list(dataset.samples)
    if args.sample_ids:
        wanted = set(args.sample_ids.split(","))
        batch = [s for s in batch if s.sample_id in wanted]
        missing = wanted - {s.sample_id for s in batch}
        if missing:
            raise DataError(f"sample ids not in manifest: {sorted(missing)}")
    assess = analyzer.build_assessment_matrices(batch, viewpoint_hardness=not args.no_viewpoint)
    adj = analyzer.build_adjustment_matrices(assess, args.alpha)
    ids = [s.sample_id for s in batch]

    def dump(name, matrix, fmt):
        with open(run.path(name), "w", encoding="utf-8") as fh:
            fh.write("sample_id," + ",".join(ids) + "\n")
            for sid, row in zip(ids, matrix):
                fh.write(sid + "," + ",".join(fmt(v) for v in row) + "\n")

    dump("is_hp.csv", assess.is_hp, lambda v: str(int(v)))
    dump("is_hn.csv", assess.is_hn, lambda v: str(int(v)))
    dump("hp_m.csv", adj.hp_m, lambda v: repr(float(v)))
    dump("hn_m.csv", adj.hn_m, lambda v: repr(float(v)))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hardreid",
        description="Hard-sample-aware metric learning experiments at desk scale.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scenario's manifests")
    p.add_argument("--scenario", help="scenario config file (TOML or JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("curate", help="score a keypoint/PGM corpus and select the best")
    p.add_argument("--manifest", required=True)
    p.add_argument("--keypoints", required=True)
    p.add_argument("--images", help="image root (default: the manifest's directory)")
    p.add_argument("--top-m", type=int, default=5, help="global selection size")
    p.add_argument("--top-n", type=int, default=2, help="per-identity selection size")
    p.add_argument("--vis-min", type=float, default=0.7)
    p.add_argument("--eps-y", type=float, default=0.05)
    p.add_argument("--eps-v", type=float, default=0.30)
    p.add_argument("--min-interocular", type=float, default=0.04)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("plan", help="evaluate the generation budget's hard-pair yield")
    p.add_argument("--num-identities", "--C", dest="num_identities", type=int, required=True)
    p.add_argument("--library-garments", "--m", dest="library_garments", type=int, required=True)
    p.add_argument("--anchors", "--n", dest="anchors", type=int, required=True)
    p.add_argument("--photos", "--K", dest="photos", type=_ints, required=True,
                   help="comma-separated usable photo count per identity")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="train on manifests, with optional coarse pretraining")
    p.add_argument("--manifest", required=True, help="base manifest (train split is used)")
    p.add_argument("--fine", help="fine-generated manifest to merge into training")
    p.add_argument("--coarse", help="coarse-generated manifest for pretraining")
    p.add_argument("--config", help="train config file (TOML or JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--mining", choices=("batch_hard", "batch_all"))
    p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    p.add_argument("--hsal", choices=("on", "off"))
    p.add_argument("--hidden-dims", type=_ints, default=[64])
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a query/gallery manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("standard", "cloth_changing", "same_clothes"),
                   default="cloth_changing")
    p.add_argument("--include-same-camera", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the fine-set x HSAL ablation grid")
    p.add_argument("--scenario", help="scenario config file")
    p.add_argument("--config", help="train config file")
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="alpha x lambda grid of trainings")
    p.add_argument("--scenario", help="scenario config file")
    p.add_argument("--config", help="train config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--alphas", type=_floats, default=list(experiments.DEFAULT_SWEEP_ALPHAS))
    p.add_argument("--lambdas", type=_floats, default=list(experiments.DEFAULT_SWEEP_LAMBDAS))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="dump a manifest's assessment/adjustment matrices")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sample-ids", help="comma-separated subset to treat as the batch")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--no-viewpoint", action="store_true",
                   help="ignore viewpoint differences when marking hard positives")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    run = _Run(out_dir)
    manifest = {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "config": getattr(args, "config", None) or getattr(args, "scenario", None),
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "kernels": kernels.active_backend(),
        "out_dir": str(out_dir),
        "started_at": _now(),
    }
    code = 0
    try:
        args.func(args, run)
        manifest["status"] = "ok"
    except ConfigError as exc:
        code = 2
        manifest["status"] = "error"
        manifest["error"] = str(exc)
        print(f"hardreid: config error: {exc}", file=sys.stderr)
    except DataError as exc:
        code = 3
        manifest["status"] = "error"
        manifest["error"] = str(exc)
        print(f"hardreid: data error: {exc}", file=sys.stderr)
    except NumericError as exc:
        code = 4
        manifest["status"] = "error"
        manifest["error"] = str(exc)
        print(f"hardreid: numeric failure: {exc}", file=sys.stderr)
    except OSError as exc:
        code = 3
        manifest["status"] = "error"
        manifest["error"] = str(exc)
        print(f"hardreid: data error: {exc}", file=sys.stderr)
    except HardReidError as exc:
        code = 2
        manifest["status"] = "error"
        manifest["error"] = str(exc)
        print(f"hardreid: error: {exc}", file=sys.stderr)
    finally:
        if code != 0:
            run.remove_outputs()
        manifest["finished_at"] = _now()
        with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
