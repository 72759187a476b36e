"""Experiment harness: scenario training runs, the ablation grid, the
alpha x lambda sweep, and the convergence comparison.

Each experiment regenerates its scenario from a seed, trains with the
requested ingredients (shared-garment fine set on/off, hard-sample
adaptive learning on/off), and scores the held-out identities under the
cloth-changing protocol. All outputs are reproducible: every float in the
CSVs is formatted with repr, and nothing depends on wall-clock time.
"""

from dataclasses import dataclass, replace

from .data import merge, stack_features
from .evaluation import EvalProtocol, evaluate
from .model import NetConfig, forward, init_params
from .scenario import generate_scenario
from .train import fit, pretrain_coarse

CC_PROTOCOL = EvalProtocol(mode="cloth_changing")
SC_PROTOCOL = EvalProtocol(mode="same_clothes")

# Table rows: (variant name, uses the fine set, uses HSAL).
ABLATION_VARIANTS = (
    ("baseline", False, False),
    ("hsal", False, True),
    ("fine", True, False),
    ("fine_hsal", True, True),
)

DEFAULT_SWEEP_ALPHAS = (0.0, 0.1, 0.2, 0.4)
DEFAULT_SWEEP_LAMBDAS = (0.05, 0.1, 0.2)


def evaluate_params(params, eval_pool, protocol, ranks=(1, 5, 10)):
    """Embed a query/gallery dataset with the net and score it."""
    queries = [s for s in eval_pool.samples if s.split == "query"]
    gallery = [s for s in eval_pool.samples if s.split == "gallery"]
    qf, _, _ = forward(params, stack_features(queries))
    gf, _, _ = forward(params, stack_features(gallery))
    return evaluate(qf, gf, queries, gallery, protocol, ranks)


@dataclass(frozen=True, eq=False)
class RunResult:
    params: object
    pretrain_rows: tuple
    rows: tuple
    curve: tuple
    report_cc: object
    report_sc: object


def run_experiment(generated, train_config, use_fine=False, use_coarse=False,
                   hidden_dims=(64,), embed_dim=16, track_curve=False):
    """One full training run on a generated scenario.

    use_fine merges the shared-garment fine set into the training data;
    use_coarse prepends the coarse pretraining phase. With track_curve the
    cloth-changing Rank-1 on the held-out identities is recorded after
    every epoch.
    """
    train_set = generated.base_train()
    if use_fine:
        train_set = merge(train_set, generated.fine)
    eval_pool = generated.eval_pool()
    net_cfg = NetConfig(
        input_dim=generated.provenance.feature_dim,
        hidden_dims=hidden_dims,
        embed_dim=embed_dim,
        num_classes=len(train_set.identities()),
        init_seed=train_config.seed,
    )
    params = init_params(net_cfg)
    pretrain_rows = []
    if use_coarse:
        params = pretrain_coarse(params, generated.coarse, train_config, collect=pretrain_rows)
    curve = []
    hooks = {}
    if track_curve:
        def on_epoch_end(epoch, p):
            report = evaluate_params(p, eval_pool, CC_PROTOCOL, ranks=(1,))
            curve.append((epoch, report.rank_k[1]))

        hooks["on_epoch_end"] = on_epoch_end
    params, rows = fit(params, train_set, train_config, hooks=hooks)
    return RunResult(
        params=params,
        pretrain_rows=tuple(pretrain_rows),
        rows=tuple(rows),
        curve=tuple(curve),
        report_cc=evaluate_params(params, eval_pool, CC_PROTOCOL),
        report_sc=evaluate_params(params, eval_pool, SC_PROTOCOL),
    )


@dataclass(frozen=True)
class AblationRow:
    variant: str
    uses_fine: bool
    uses_hsal: bool
    seed: int
    rank1: float
    map_score: float


@dataclass(frozen=True, eq=False)
class AblationResult:
    details: tuple
    seeds: tuple

    def mean(self, variant, field="rank1"):
        vals = [getattr(r, field) for r in self.details if r.variant == variant]
        return sum(vals) / len(vals)

    def summary_rows(self):
        out = []
        for name, uses_fine, uses_hsal in ABLATION_VARIANTS:
            out.append(
                (name, uses_fine, uses_hsal, self.mean(name, "rank1"), self.mean(name, "map_score"))
            )
        return out


def run_ablation(scenario_config, train_config, seeds=(0, 1, 2)):
    """The 2x2 grid {fine set on/off} x {HSAL on/off}, averaged over seeds.

    Both the scenario and the training run are re-seeded per seed, so the
    averages cover data draws as well as initializations.
    """
    details = []
    for seed in seeds:
        generated = generate_scenario(replace(scenario_config, seed=seed))
        for name, uses_fine, uses_hsal in ABLATION_VARIANTS:
            cfg = replace(train_config, seed=seed, hsal_enabled=uses_hsal)
            res = run_experiment(generated, cfg, use_fine=uses_fine)
            details.append(
                AblationRow(
                    variant=name,
                    uses_fine=uses_fine,
                    uses_hsal=uses_hsal,
                    seed=seed,
                    rank1=res.report_cc.rank_k[1],
                    map_score=res.report_cc.map_score,
                )
            )
    return AblationResult(details=tuple(details), seeds=tuple(seeds))


@dataclass(frozen=True, eq=False)
class SweepCell:
    alpha: float
    lam: float
    rank1: float
    map_score: float
    rows: tuple


@dataclass(frozen=True, eq=False)
class SweepResult:
    alphas: tuple
    lambdas: tuple
    cells: dict


def run_sweep(scenario_config, train_config, alphas=DEFAULT_SWEEP_ALPHAS,
              lambdas=DEFAULT_SWEEP_LAMBDAS):
    """Full alpha x lambda grid of HSAL trainings on base plus fine set."""
    generated = generate_scenario(scenario_config)
    cells = {}
    for alpha in alphas:
        for lam in lambdas:
            cfg = replace(train_config, alpha=alpha, lam=lam, hsal_enabled=True)
            res = run_experiment(generated, cfg, use_fine=True)
            cells[(alpha, lam)] = SweepCell(
                alpha=alpha,
                lam=lam,
                rank1=res.report_cc.rank_k[1],
                map_score=res.report_cc.map_score,
                rows=res.rows,
            )
    return SweepResult(alphas=tuple(alphas), lambdas=tuple(lambdas), cells=cells)


@dataclass(frozen=True)
class ConvergenceRow:
    seed: int
    baseline_rank1: float
    reached_epoch: int | None
    within_budget: bool


@dataclass(frozen=True, eq=False)
class ConvergenceResult:
    rows: tuple
    budget_epochs: int

    def seeds_within_budget(self):
        return sum(1 for r in self.rows if r.within_budget)


def run_convergence(scenario_config, train_config, seeds=(0, 1, 2), budget_epochs=25):
    """HSAL-vs-plain convergence race on identical data and epoch budgets.

    For each seed, the plain-triplet run sets the target: its final
    cloth-changing Rank-1 after the full epoch budget. The HSAL run then
    reports the first epoch at which it meets or beats that target.
    """
    rows = []
    for seed in seeds:
        generated = generate_scenario(replace(scenario_config, seed=seed))
        plain_cfg = replace(train_config, seed=seed, hsal_enabled=False)
        plain = run_experiment(generated, plain_cfg, use_fine=True, track_curve=True)
        target = plain.curve[-1][1]
        hsal_cfg = replace(train_config, seed=seed, hsal_enabled=True)
        hsal = run_experiment(generated, hsal_cfg, use_fine=True, track_curve=True)
        reached = next((epoch for epoch, r1 in hsal.curve if r1 >= target), None)
        rows.append(
            ConvergenceRow(
                seed=seed,
                baseline_rank1=target,
                reached_epoch=reached,
                within_budget=reached is not None and reached <= budget_epochs,
            )
        )
    return ConvergenceResult(rows=tuple(rows), budget_epochs=budget_epochs)


def _fmt(value):
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_ablation_csv(result, path):
    """The four-row variant table with seed-averaged metrics."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("variant,uses_fine,uses_hsal,rank1_mean,map_mean\n")
        for row in result.summary_rows():
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_ablation_details_csv(result, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("variant,uses_fine,uses_hsal,seed,rank1,map\n")
        for r in result.details:
            cells = (r.variant, r.uses_fine, r.uses_hsal, r.seed, r.rank1, r.map_score)
            fh.write(",".join(_fmt(v) for v in cells) + "\n")


def write_sweep_csv(result, path, field="rank1"):
    """Heatmap grid: one row per alpha, one column per lambda."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("alpha," + ",".join(repr(float(l)) for l in result.lambdas) + "\n")
        for alpha in result.alphas:
            cells = [repr(float(alpha))]
            for lam in result.lambdas:
                cells.append(repr(float(getattr(result.cells[(alpha, lam)], field))))
            fh.write(",".join(cells) + "\n")


def write_convergence_csv(result, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("seed,baseline_rank1,reached_epoch,within_budget\n")
        for r in result.rows:
            reached = "" if r.reached_epoch is None else str(r.reached_epoch)
            fh.write(f"{r.seed},{repr(r.baseline_rank1)},{reached},{int(r.within_budget)}\n")
