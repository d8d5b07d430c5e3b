"""Seeded experiment drivers, configuration and CSV/JSON output.

Every trial draws from a labeled substream of the run seed, so results do
not depend on execution order and rows are sorted before they are written.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attention as attn
from .decomposition import decompose_pre_gd, decompose_raw_gd
from .estimators import (
    ETA_GRID,
    PENALTY_GRID,
    DivergenceError,
    gd_solve,
    lasso_cd,
    ols_solve,
    pre_gd_solve,
    ridge_solve,
    theoretical_schedule,
)
from .linalg import RandomSource, empirical_second_moment, mat_vec
from .preprocess import estimate_correlations, population_reweighter
from .tasks import PRIORS, SparseLinearTask, build_prompt, excess_risk_pre, excess_risk_raw, sample_dataset, sample_task

EXPERIMENTS = ("verify", "sweep", "heads", "concentration", "probe", "decompose")
CSV_HEADER = (
    "experiment", "d", "s", "n", "q", "sigma", "estimator_or_layer_head", "metric", "value", "seed", "trial",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    d: int = 16
    s: int = 4
    n: tuple = (64, 128)
    q: int = 1
    k: int = 4
    sigma: tuple = (0.1,)
    eta: float = 0.1
    eta_grid: tuple = ETA_GRID
    ridge_grid: tuple = PENALTY_GRID
    lasso_grid: tuple = PENALTY_GRID
    t: int = 64
    steps: tuple = (0, 1, 2, 4, 8, 16, 32, 64)
    trials: int = 200
    decomp_trials: int = 500
    seed: int = 0
    prior: str = "rademacher_over_sqrt_s"
    cov: float = 1.0
    delta: float = 0.05
    lasso_max_sweeps: int = 1000
    lasso_tol: float = 1e-8
    corrupt_readout: bool = False
    output_path: str = ""

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        for name in ("d", "s", "q", "trials", "decomp_trials", "lasso_max_sweeps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.k < 0 or self.t < 0 or any(t < 0 for t in self.steps):
            raise ConfigError("step counts must be >= 0")
        if self.s > self.d:
            raise ConfigError(f"s={self.s} exceeds d={self.d}")
        if not self.n or any(n < 1 for n in self.n):
            raise ConfigError(f"n values must be >= 1, got {self.n}")
        if not self.sigma or any(not sig >= 0 for sig in self.sigma):
            raise ConfigError(f"sigma values must be >= 0, got {self.sigma}")
        for name in ("eta_grid", "ridge_grid", "lasso_grid"):
            grid = getattr(self, name)
            if not grid or any(not g > 0 for g in grid):
                raise ConfigError(f"{name} must be a nonempty list of positive reals")
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.prior not in PRIORS:
            raise ConfigError(f"prior must be one of {PRIORS}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.cov < 0:
            raise ConfigError("cov must be >= 0")


# Defaults that differ from the dataclass ones, per experiment.
EXPERIMENT_DEFAULTS = {
    "verify": {"trials": 120, "eta": 0.1},
    "sweep": {"n": (64, 128), "sigma": (0.1,), "t": 64},
    "heads": {"n": (64,), "k": 4, "eta": 1.0, "q": 1},
    "concentration": {"n": tuple(64 * 2**i for i in range(8))},
    "probe": {"n": (64,), "q": 33, "trials": 100, "k": 0},
    "decompose": {"n": (64,), "t": 16, "eta": 0.5, "trials": 100},
}

_LIST_INT = {"n", "steps"}
_LIST_FLOAT = {"sigma", "eta_grid", "ridge_grid", "lasso_grid"}
_INT = {"d", "s", "q", "k", "t", "trials", "decomp_trials", "seed", "lasso_max_sweeps"}
_FLOAT = {"eta", "cov", "delta", "lasso_tol"}
_BOOL = {"corrupt_readout"}
_STR = {"prior", "output_path"}


def _coerce(key, raw):
    raw = raw.strip()
    try:
        if key in _LIST_INT:
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        if key in _LIST_FLOAT:
            return tuple(float(v) for v in raw.replace(" ", "").split(",") if v)
        if key in _INT:
            return int(raw)
        if key in _FLOAT:
            return float(raw)
        if key in _BOOL:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if key in _STR:
            return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unknown config key {key!r}")


def parse_pairs(lines, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "output":
            key = "output_path"
        out[key] = _coerce(key, value)
    return out


def load_config(experiment, path=None, overrides=(), seed=None, output_path=None):
    values = dict(EXPERIMENT_DEFAULTS.get(experiment, {}))
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_pairs(text.splitlines(), str(path)))
    values.update(parse_pairs(overrides, "--override"))
    if seed is not None:
        values["seed"] = seed
    if output_path is not None:
        values["output_path"] = str(output_path)
    values.pop("experiment", None)
    return ExperimentConfig(experiment=experiment, **values)


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    d: int | None
    s: int | None
    n: int | None
    q: int | None
    sigma: float | None
    label: str
    metric: str
    value: float
    seed: int
    trial: int

    def sort_key(self):
        def k(v):
            return (v is None, v if v is not None else 0)

        return (k(self.d), k(self.s), k(self.n), k(self.q), k(self.sigma), self.trial, self.label, self.metric)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".12g") if math.isfinite(v) else "diverged"
    return str(v)


def write_csv(rows, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in sorted(rows, key=ResultRow.sort_key):
                writer.writerow([
                    r.experiment, _fmt(r.d), _fmt(r.s), _fmt(r.n), _fmt(r.q), _fmt(r.sigma),
                    r.label, r.metric, _fmt(float(r.value)), r.seed, r.trial,
                ])
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc


def read_csv(path):
    def opt(cast, v):
        return None if v == "" else cast(v)

    rows = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            value = math.inf if rec["value"] == "diverged" else float(rec["value"])
            rows.append(ResultRow(
                rec["experiment"], opt(int, rec["d"]), opt(int, rec["s"]), opt(int, rec["n"]),
                opt(int, rec["q"]), opt(float, rec["sigma"]), rec["estimator_or_layer_head"],
                rec["metric"], value, int(rec["seed"]), int(rec["trial"]),
            ))
    return rows


@dataclass
class RunResult:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    checks: list = field(default_factory=list)  # (name, max_deviation, tolerance, passed)
    notes: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c[3] for c in self.checks)

    def summary(self):
        return {
            "experiment": self.config.experiment,
            "config": {k: v for k, v in dataclasses.asdict(self.config).items() if k != "output_path"},
            "rows": len(self.rows),
            "checks_passed": sum(1 for c in self.checks if c[3]),
            "checks_failed": sum(1 for c in self.checks if not c[3]),
            "checks": [
                {"name": name, "max_deviation": _json_float(dev), "tolerance": tol, "passed": ok}
                for name, dev, tol, ok in self.checks
            ],
            "max_deviations": {name: _json_float(dev) for name, dev, _, _ in self.checks},
            "notes": {k: _json_float(v) if isinstance(v, float) else v for k, v in sorted(self.notes.items())},
        }


def _json_float(v):
    v = float(v)
    return float(format(v, ".12g")) if math.isfinite(v) else "diverged"


def write_summary(result, path, wall_clock=None):
    summary = result.summary()
    if wall_clock is not None:
        summary["wall_clock_seconds"] = round(wall_clock, 3)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _instance(cfg, rng, d, s, n, q, sigma):
    task = sample_task(d, s, np.full(d, cfg.cov), sigma, cfg.prior, rng.split("task"))
    data, noise = sample_dataset(task, n, q, rng.split("data"))
    return task, data, noise


def _row(cfg, label, metric, value, trial, *, d=None, s=None, n=None, q=None, sigma=None):
    return ResultRow(cfg.experiment, d, s, n, q, sigma, label, metric, float(value), cfg.seed, trial)


# ---------------------------------------------------------------- verify


def _model_for(cfg, d, n, eta, k):
    model = attn.assemble_icl_model(d, n, eta, k)
    if cfg.corrupt_readout:
        model = dataclasses.replace(model, w_o=-model.w_o)
    return model


def _pre_gd_queries(data, eta, k):
    traj = pre_gd_solve(data.x, data.y, eta, k)
    return (data.query_x * traj.r_hat) @ traj.final


def _check_equivalence(cfg, root):
    worst = 0.0
    for i in range(cfg.trials):
        rng = root.split(f"equivalence/{i}")
        g = rng.split("shape").generator
        d = int(g.choice([2, 4, 8, 16]))
        s = int(g.integers(1, d // 2 + 1))
        n = int(g.integers(8, 65))
        k = i % 9
        sigma = (0.0, 0.1, 0.5)[i % 3]
        q = int(g.integers(1, 5))
        task, data, _ = _instance(cfg, rng, d, s, n, q, sigma)
        y_hat = _model_for(cfg, d, n, cfg.eta, k).predict(data)
        oracle = _pre_gd_queries(data, cfg.eta, k)
        worst = max(worst, float(np.max(np.abs(y_hat - oracle) / (1.0 + np.abs(y_hat)))))
    return worst


def _check_decomposition(cfg, root):
    worst_pre = worst_raw = 0.0
    two_term = 0.0
    for i in range(cfg.decomp_trials):
        rng = root.split(f"decomposition/{i}")
        g = rng.split("shape").generator
        d = int(g.choice([2, 4, 8, 16]))
        s = int(g.integers(1, d // 2 + 1))
        n = int(g.integers(8, 129))
        t = int(g.integers(0, 33))
        sigma = (0.0, 0.1, 0.2, 0.5)[i % 4]
        task, data, noise = _instance(cfg, rng, d, s, n, 1, sigma)
        for decompose, eta in ((decompose_pre_gd, 0.5), (decompose_raw_gd, 0.2)):
            dec = decompose(data, noise, task, eta, t)
            rel = dec.identity_gap / (1.0 + dec.total)
            if decompose is decompose_pre_gd:
                worst_pre = max(worst_pre, rel)
            else:
                worst_raw = max(worst_raw, rel)
            two_term = max(two_term, dec.two_term_gap / (1.0 + dec.total))
    return worst_pre, worst_raw, two_term


def _check_masking(cfg, root):
    gd_dev = feat_dev = 0.0
    involution = True
    for i in range(max(1, cfg.trials // 4)):
        rng = root.split(f"masking/{i}")
        g = rng.split("shape").generator
        d = int(g.choice([2, 4, 8, 16]))
        s = int(g.integers(1, d // 2 + 1))
        n = int(g.integers(8, 65))
        k = int(g.integers(1, 9))
        task, data, _ = _instance(cfg, rng, d, s, n, 2, 0.1)
        model = attn.assemble_icl_model(d, n, cfg.eta, k)
        base = model.predict(data)
        layer = int(g.integers(1, k + 1))
        shorter = attn.assemble_icl_model(d, n, cfg.eta, k - 1).predict(data)
        gd_dev = max(gd_dev, float(np.max(np.abs(attn.mask_head(model, layer, 0).predict(data) - shorter))))
        j = int(g.integers(0, d))
        traj = pre_gd_solve(data.x, data.y, cfg.eta, 0)
        r_hat = traj.r_hat.copy()
        r_hat[j] = 0.0
        w = gd_solve(data.x * r_hat, data.y, cfg.eta, k).final
        oracle = (data.query_x * r_hat) @ w
        masked = attn.mask_head(model, 0, j)
        feat_dev = max(feat_dev, float(np.max(np.abs(masked.predict(data) - oracle))))
        restored = attn.unmask_head(masked, 0, j).predict(data)
        involution &= bool(np.array_equal(restored, base))
    return gd_dev, feat_dev, involution


def _check_layer_one(cfg, root):
    worst = 0.0
    for i in range(max(1, cfg.trials // 4)):
        rng = root.split(f"layer1/{i}")
        d = (1, 2, 4, 8, 16)[i % 5]
        n = 8 + 7 * i % 57
        task, data, _ = _instance(cfg, rng, d, max(1, d // 2), n, 3, 0.1)
        trace = attn.forward(attn.assemble_icl_model(d, n, cfg.eta, 0), build_prompt(data))
        r_hat = estimate_correlations(data.x, data.y).r_hat
        h1 = trace.hidden[1]
        worst = max(worst, float(np.max(np.abs(h1[:d].T - np.vstack([data.x, data.query_x]) * r_hat))))
        worst = max(worst, float(np.max(np.abs(h1[d, :n] - data.y))), float(np.max(np.abs(h1[d, n:]))))
    return worst


def _check_query_independence(cfg, root):
    rng = root.split("query-independence")
    task, data, _ = _instance(cfg, rng, 8, 2, 32, 3, 0.1)
    model = attn.assemble_icl_model(8, 32, cfg.eta, 4)
    e = build_prompt(data).entries.copy()
    base = attn.forward(model, e).y_hat[32]
    e[:-1, 33] = rng.split("edit").normal(8) * 10
    return abs(attn.forward(model, e).y_hat[32] - base)


def _check_small_oracles():
    """Hand-computed values from the module examples; returns max deviation."""
    devs = [
        np.max(np.abs(mat_vec([[1, 2], [3, 4]], [1, 1]) - [3, 7])),
        np.max(np.abs(empirical_second_moment([[1, 1], [1, -1]]) - np.eye(2))),
        np.max(np.abs(estimate_correlations([[1, 0], [0, 1]], [2, 3]).r_hat - [1, 1.5])),
        abs(gd_solve([[2.0]], [4.0], 0.1, 1).final[0] - 0.8),
        np.max(np.abs(ols_solve([[1.0, 0.0]], [2.0]) - [2, 0])),
        abs(excess_risk_raw([1.0, 1.0], SparseLinearTask.from_weights([0.0, 0.0], [1.0, 4.0])) - 5.0),
    ]
    task = SparseLinearTask.from_weights([2.0, 0.0])
    devs.append(excess_risk_pre([1.0, 0.0], [2.0, 1.0], task))
    devs.append(np.max(np.abs(population_reweighter(SparseLinearTask.from_weights([1.0, -1.0], [2.0, 3.0])) - [2, -3])))
    return float(max(devs))


def _check_recovery(cfg, root):
    """Noiseless ridge / OLS / Lasso / GD recovery of w*."""
    rng = root.split("recovery")
    task, data, _ = _instance(cfg, rng, 8, 2, 64, 1, 0.0)
    x, y = data.examples
    return {
        "ridge_near_interpolation": (float(np.max(np.abs(ridge_solve(x, y, 1e-10) - task.w_star))), 1e-4),
        "ols_exact_recovery": (float(np.max(np.abs(ols_solve(x, y) - task.w_star))), 1e-8),
        "lasso_vanishing_penalty": (float(np.max(np.abs(lasso_cd(x, y, 1e-12, 10000, 1e-14).coef - task.w_star))), 1e-4),
        "gd_noiseless_convergence": (excess_risk_raw(gd_solve(x, y, 0.5, 500).final, task), 1e-6),
        "one_step_gd_equals_eta_rhat": (
            float(np.max(np.abs(gd_solve(x, y, 0.3, 1).final - 0.3 * estimate_correlations(x, y).r_hat))), 1e-12,
        ),
    }


def _check_schedule():
    task = SparseLinearTask.from_weights(np.r_[np.full(4, 0.5), np.zeros(12)], noise_std=0.1)
    a = theoretical_schedule(task, 10**6)
    b = theoretical_schedule(task, 2 * 10**6)
    return abs(b.eta_t_target / a.eta_t_target - math.sqrt(2))


def run_verify(cfg):
    root = RandomSource(cfg.seed).split("verify")
    result = RunResult(cfg)

    def check(name, dev, tol):
        dev = float(dev)
        result.checks.append((name, dev, tol, bool(dev <= tol)))

    check("construction_oracle_equivalence", _check_equivalence(cfg, root), 1e-9)
    check("layer1_matches_reweighting", _check_layer_one(cfg, root), 1e-12)
    pre, raw, two_term = _check_decomposition(cfg, root)
    check("decomposition_identity_pre_gd", pre, 1e-8)
    check("decomposition_identity_raw_gd", raw, 1e-8)
    result.notes["decomposition_two_term_gap_max"] = two_term
    gd_dev, feat_dev, involution = _check_masking(cfg, root)
    check("mask_gd_head_drops_one_step", gd_dev, 1e-9)
    check("mask_layer1_head_zeroes_feature", feat_dev, 1e-9)
    check("mask_unmask_bit_identical", 0.0 if involution else 1.0, 0.0)
    check("query_column_independence", _check_query_independence(cfg, root), 0.0)
    check("hand_computed_examples", _check_small_oracles(), 1e-12)
    for name, (dev, tol) in _check_recovery(cfg, root).items():
        check(name, dev, tol)
    check("schedule_sqrt2_scaling", _check_schedule(), 1e-3)
    for name, dev, tol, ok in result.checks:
        result.rows.append(_row(cfg, name, "max_deviation", dev, -1))
        result.rows.append(_row(cfg, name, "passed", float(ok), -1))
    return result


# ---------------------------------------------------------------- sweep


def _risk_or_inf(fn):
    try:
        value = fn()
    except (DivergenceError, np.linalg.LinAlgError):
        return math.inf
    return value if math.isfinite(value) else math.inf


def _tune(risks_by_param):
    """Pick the parameter with the lowest mean risk; ties go to the larger value."""
    best = None
    for param, risks in risks_by_param.items():
        mean = float(np.mean(risks))
        if not math.isfinite(mean):
            continue
        if best is None or mean < best[1] or (mean == best[1] and param > best[0]):
            best = (param, mean)
    return best


def sweep_cell(cfg, n, sigma, root):
    """Closed-form risks of every estimator on ``cfg.trials`` instances.

    Step sizes and penalties are chosen once per cell by the lowest mean risk
    across its trials. Returns ``(risks, tuned)`` where ``risks`` maps an
    estimator name to a per-trial array.
    """
    d, s, t = cfg.d, cfg.s, cfg.t
    instances = [_instance(cfg, root.split(f"trial={i}"), d, s, n, cfg.q, sigma) for i in range(cfg.trials)]
    candidates = {}
    candidates["pre_gd"] = {
        eta: [_risk_or_inf(lambda: excess_risk_pre(*_pre_final(data, eta, t), task)) for task, data, _ in instances]
        for eta in cfg.eta_grid
    }
    candidates["raw_gd"] = {
        eta: [_risk_or_inf(lambda: excess_risk_raw(gd_solve(*data.examples, eta, t).final, task))
              for task, data, _ in instances]
        for eta in cfg.eta_grid
    }
    candidates["ridge"] = {
        lam: [excess_risk_raw(ridge_solve(*data.examples, lam), task) for task, data, _ in instances]
        for lam in cfg.ridge_grid
    }
    lasso = {alpha: [] for alpha in cfg.lasso_grid}
    for task, data, _ in instances:
        w = None
        for alpha in sorted(cfg.lasso_grid, reverse=True):
            w = lasso_cd(*data.examples, alpha, cfg.lasso_max_sweeps, cfg.lasso_tol, w0=w).coef
            lasso[alpha].append(excess_risk_raw(w, task))
    candidates["lasso"] = lasso
    risks, tuned = {}, {}
    for name, table in candidates.items():
        best = _tune(table)
        if best is None:
            tuned[name] = math.nan
            risks[name] = np.full(cfg.trials, math.inf)
        else:
            tuned[name] = best[0]
            risks[name] = np.asarray(table[best[0]], dtype=np.float64)
    risks["ols"] = np.array([excess_risk_raw(ols_solve(*data.examples), task) for task, data, _ in instances])
    return risks, tuned


def _pre_final(data, eta, t):
    traj = pre_gd_solve(*data.examples, eta, t)
    return traj.final, traj.r_hat


def run_sweep(cfg):
    root = RandomSource(cfg.seed).split("sweep")
    result = RunResult(cfg)
    hyper = {"pre_gd": "tuned_eta", "raw_gd": "tuned_eta", "ridge": "tuned_lambda", "lasso": "tuned_alpha"}
    for n in cfg.n:
        for sigma in cfg.sigma:
            risks, tuned = sweep_cell(cfg, n, sigma, root.split(f"n={n}/sigma={sigma!r}"))
            where = dict(d=cfg.d, s=cfg.s, n=n, q=cfg.q, sigma=sigma)
            for name, values in risks.items():
                for trial, v in enumerate(values):
                    result.rows.append(_row(cfg, name, "excess_risk", v, trial, **where))
                result.rows.append(_row(cfg, name, "median_excess_risk", float(np.median(values)), -1, **where))
                if name in tuned:
                    result.rows.append(_row(cfg, name, hyper[name], tuned[name], -1, **where))
    return result


# ---------------------------------------------------------------- heads


def run_heads(cfg):
    """Head importance of the constructed model on one fixed task.

    The support must be shared across evaluation instances for per-head
    attribution to mean anything, so one task is drawn per run and
    ``trials`` datasets are drawn from it.
    """
    root = RandomSource(cfg.seed).split("heads")
    result = RunResult(cfg)
    for n in cfg.n:
        for sigma in cfg.sigma:
            cell = root.split(f"n={n}/sigma={sigma!r}")
            task = sample_task(cfg.d, cfg.s, np.full(cfg.d, cfg.cov), sigma, cfg.prior, cell.split("task"))
            instances = [
                (task, sample_dataset(task, n, cfg.q, cell.split(f"trial={i}"))[0]) for i in range(cfg.trials)
            ]
            model = attn.assemble_icl_model(cfg.d, n, cfg.eta, cfg.k)
            imp = attn.head_importance(model, instances)
            where = dict(d=cfg.d, s=cfg.s, n=n, q=cfg.q, sigma=sigma)
            for i, raw, norm, flagged in imp.as_rows():
                for j in range(len(raw)):
                    label = f"L{i + 1}H{j + 1}"
                    result.rows.append(_row(cfg, label, "delta_risk", raw[j], -1, **where))
                    result.rows.append(_row(cfg, label, "importance", norm[j], -1, **where))
                    result.rows.append(_row(cfg, label, "flagged", float(flagged), -1, **where))
                result.rows.append(_row(cfg, f"L{i + 1}", "row_sum", float(np.sum(norm)), -1, **where))
            support = list(task.support)
            mass = float(np.sum(imp.normalized[0][support])) if not imp.flagged[0] else math.nan
            result.rows.append(_row(cfg, "L1", "support_mass", mass, -1, **where))
            result.notes[f"support_n={n}_sigma={sigma!r}"] = ",".join(str(j + 1) for j in support)
    return result


# ---------------------------------------------------------------- concentration


def loglog_slope(ns, errors, stderrs=None):
    """Least-squares slope of log(errors) on log(ns), with a delta-method standard error."""
    x = np.log(np.asarray(ns, dtype=np.float64))
    yv = np.log(np.asarray(errors, dtype=np.float64))
    xc = x - x.mean()
    coef = xc / np.sum(xc * xc)
    slope = float(coef @ yv)
    if stderrs is None:
        return slope, math.nan
    rel = np.asarray(stderrs) / np.asarray(errors)
    return slope, float(np.sqrt(np.sum(coef * coef * rel * rel)))


def concentration_errors(cfg, n, sigma, root):
    """Per-trial (max-abs, l2) errors of r_hat against the population reweighter."""
    errs = np.empty((cfg.trials, 2))
    for i in range(cfg.trials):
        task, data, _ = _instance(cfg, root.split(f"trial={i}"), cfg.d, cfg.s, n, 1, sigma)
        diff = estimate_correlations(*data.examples).r_hat - population_reweighter(task)
        errs[i] = np.max(np.abs(diff)), np.linalg.norm(diff)
    return errs


def run_concentration(cfg):
    if len(cfg.n) < 2 or max(cfg.n) < 8 * min(cfg.n):
        raise ConfigError("concentration needs an n list spanning at least 3 octaves")
    root = RandomSource(cfg.seed).split("concentration")
    result = RunResult(cfg)
    for sigma in cfg.sigma:
        means, sems, mean_logs, l2_means, l2_sems = [], [], [], [], []
        for n in cfg.n:
            both = concentration_errors(cfg, n, sigma, root.split(f"n={n}/sigma={sigma!r}"))
            errs, l2 = both[:, 0], both[:, 1]
            where = dict(d=cfg.d, s=cfg.s, n=n, q=1, sigma=sigma)
            for trial, (e, e2) in enumerate(both):
                result.rows.append(_row(cfg, "rhat", "max_abs_error", e, trial, **where))
                result.rows.append(_row(cfg, "rhat", "l2_error", e2, trial, **where))
            means.append(errs.mean())
            sems.append(errs.std(ddof=1) / math.sqrt(len(errs)) if len(errs) > 1 else math.nan)
            mean_logs.append(np.mean(np.log(errs)))
            l2_means.append(l2.mean())
            l2_sems.append(l2.std(ddof=1) / math.sqrt(len(l2)) if len(l2) > 1 else math.nan)
            result.rows.append(_row(cfg, "rhat", "mean_max_abs_error", means[-1], -1, **where))
            result.rows.append(_row(cfg, "rhat", "mean_l2_error", l2_means[-1], -1, **where))
        slope, se = loglog_slope(cfg.n, means, sems)
        l2_slope, l2_se = loglog_slope(cfg.n, l2_means, l2_sems)
        slope_mean_log = float(np.polyfit(np.log(cfg.n), mean_logs, 1)[0])
        where = dict(d=cfg.d, s=cfg.s, q=1, sigma=sigma)
        result.rows.append(_row(cfg, "rhat", "loglog_slope", slope, -1, **where))
        result.rows.append(_row(cfg, "rhat", "loglog_slope_stderr", se, -1, **where))
        result.rows.append(_row(cfg, "rhat", "mean_log_slope", slope_mean_log, -1, **where))
        result.rows.append(_row(cfg, "rhat", "l2_loglog_slope", l2_slope, -1, **where))
        result.rows.append(_row(cfg, "rhat", "l2_loglog_slope_stderr", l2_se, -1, **where))
    return result


# ---------------------------------------------------------------- probe


def run_probe(cfg):
    """Probe the constructed first layer: fit GD on q-1 extracted query features.

    The same protocol on the raw query features gives the comparison curve.
    Step sizes are tuned per (curve, step count) by mean excess risk.
    """
    if cfg.q < 2:
        raise ConfigError("probe needs q >= 2")
    root = RandomSource(cfg.seed).split("probe")
    result = RunResult(cfg)
    steps = sorted(set(cfg.steps))
    t_max = max(steps)
    for n in cfg.n:
        for sigma in cfg.sigma:
            cell = root.split(f"n={n}/sigma={sigma!r}")
            where = dict(d=cfg.d, s=cfg.s, n=n, q=cfg.q, sigma=sigma)
            model = attn.assemble_icl_model(cfg.d, n, cfg.eta, cfg.k)
            curves = {"probe_pre": {}, "probe_raw": {}}
            for i in range(cfg.trials):
                task, data, _ = _instance(cfg, cell.split(f"trial={i}"), cfg.d, cfg.s, n, cfg.q, sigma)
                trace = attn.forward(model, build_prompt(data))
                feats = np.array(attn.extract_preprocessed(trace, cfg.d, n, cfg.q))
                r_hat = estimate_correlations(*data.examples).r_hat
                dev = float(np.max(np.abs(feats - data.query_x * r_hat)))
                result.rows.append(_row(cfg, "probe_pre", "extract_deviation", dev, i, **where))
                train_y = data.query_y_true[:-1]
                for label, train_x in (("probe_pre", feats[:-1]), ("probe_raw", data.query_x[:-1])):
                    for eta in cfg.eta_grid:
                        try:
                            iters = gd_solve(train_x, train_y, eta, t_max).iterates
                        except DivergenceError:
                            iters = None
                        for t in steps:
                            if iters is None:
                                risk = math.inf
                            elif label == "probe_pre":
                                risk = excess_risk_pre(iters[t], r_hat, task)
                            else:
                                risk = excess_risk_raw(iters[t], task)
                            curves[label].setdefault(t, {}).setdefault(eta, []).append(risk)
            for label, by_t in curves.items():
                for t in steps:
                    best = _tune(by_t[t])
                    eta, _ = best if best is not None else (math.nan, math.inf)
                    values = by_t[t][eta] if best is not None else [math.inf] * cfg.trials
                    for trial, v in enumerate(values):
                        result.rows.append(_row(cfg, label, f"excess_risk_t{t}", v, trial, **where))
                    result.rows.append(_row(cfg, label, f"median_excess_risk_t{t}", float(np.median(values)), -1, **where))
                    result.rows.append(_row(cfg, label, f"tuned_eta_t{t}", eta, -1, **where))
    return result


# ---------------------------------------------------------------- decompose


def run_decompose(cfg):
    root = RandomSource(cfg.seed).split("decompose")
    result = RunResult(cfg)
    for n in cfg.n:
        for sigma in cfg.sigma:
            cell = root.split(f"n={n}/sigma={sigma!r}")
            where = dict(d=cfg.d, s=cfg.s, n=n, q=cfg.q, sigma=sigma)
            for i in range(cfg.trials):
                task, data, noise = _instance(cfg, cell.split(f"trial={i}"), cfg.d, cfg.s, n, cfg.q, sigma)
                for label, fn in (("pre_gd", decompose_pre_gd), ("raw_gd", decompose_raw_gd)):
                    dec = fn(data, noise, task, cfg.eta, cfg.t)
                    for metric in ("bias", "variance", "cross", "total", "identity_gap", "two_term_gap"):
                        result.rows.append(_row(cfg, label, metric, getattr(dec, metric), i, **where))
    return result


RUNNERS = {
    "verify": run_verify,
    "sweep": run_sweep,
    "heads": run_heads,
    "concentration": run_concentration,
    "probe": run_probe,
    "decompose": run_decompose,
}


def run(cfg):
    return RUNNERS[cfg.experiment](cfg)
