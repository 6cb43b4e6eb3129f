"""Error metrics, distribution summaries and data-driven vs physics-informed comparisons."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError

from .darcy import ForwardModel
from .errors import ConfigError, DimensionMismatch, NumericalError
from .mlp import MlpParams
from .training import Dataset, predict_coefficients

log = logging.getLogger(__name__)

MIN_HIST_BINS = 20
MAX_HIST_BINS = 200
METRICS = ("pres", "perm")


def pressure_rmse(pred_obs, ref_obs):
    """Root-mean-square pressure error along the last axis."""
    pred_obs, ref_obs = np.asarray(pred_obs, dtype=float), np.asarray(ref_obs, dtype=float)
    if pred_obs.shape != ref_obs.shape:
        raise DimensionMismatch(f"pressure vectors differ in shape: {pred_obs.shape} vs {ref_obs.shape}")
    return np.sqrt(np.mean((pred_obs - ref_obs) ** 2, axis=-1))


def perm_rel_l2(pred_logk, true_logk):
    """``||pred - true|| / ||true||`` along the last axis; ``||pred||`` when ``true`` is zero."""
    pred_logk, true_logk = np.asarray(pred_logk, dtype=float), np.asarray(true_logk, dtype=float)
    if pred_logk.shape != true_logk.shape:
        raise DimensionMismatch(f"fields differ in shape: {pred_logk.shape} vs {true_logk.shape}")
    num = np.linalg.norm(pred_logk - true_logk, axis=-1)
    den = np.linalg.norm(true_logk, axis=-1)
    safe = np.where(den > 0, den, 1.0)
    return np.where(den > 0, num / safe, np.linalg.norm(pred_logk, axis=-1))


def _nonempty(values) -> np.ndarray:
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ConfigError("statistics of an empty sample are undefined")
    return v


def ecdf(values) -> list[tuple[float, float]]:
    """Right-continuous empirical CDF as ``(value, P(X <= value))`` at each distinct value."""
    v = np.sort(_nonempty(values))
    uniq = np.unique(v)
    counts = np.searchsorted(v, uniq, side="right")
    return [(float(x), float(c) / v.size) for x, c in zip(uniq, counts)]


def ecdf_quantile(values, q: float) -> float:
    """Smallest observed value whose ECDF reaches ``q``."""
    v = np.sort(_nonempty(values))
    pos = int(np.ceil(q * v.size)) - 1
    return float(v[min(max(pos, 0), v.size - 1)])


@dataclass(frozen=True)
class BoxStats:
    median: float
    q1: float
    q3: float
    lo_whisker: float
    hi_whisker: float


def box_stats(values) -> BoxStats:
    """Quartiles by linear interpolation; whiskers at the most extreme data within 1.5 IQR.

    A whisker never ends inside the box (it is clamped to its quartile).
    """
    v = _nonempty(values)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo = v[v >= q1 - 1.5 * iqr].min()
    hi = v[v <= q3 + 1.5 * iqr].max()
    return BoxStats(float(med), float(q1), float(q3), float(min(lo, q1)), float(max(hi, q3)))


def histogram(values, edges=None):
    """Counts over Freedman-Diaconis bins (at least 20)."""
    v = _nonempty(values)
    if edges is None:
        edges = histogram_edges(v)
    counts, edges = np.histogram(v, bins=edges)
    return counts, edges


def histogram_edges(values) -> np.ndarray:
    """Freedman-Diaconis bin count, clipped to [20, 200], over the data range."""
    v = _nonempty(values)
    q1, q3 = np.percentile(v, [25, 75])
    width = 2.0 * (q3 - q1) / len(v) ** (1 / 3)
    span = float(v.max() - v.min())
    n_fd = np.ceil(span / width) if width > 0 and span < MAX_HIST_BINS * width else MAX_HIST_BINS
    if width == 0:
        n_fd = MIN_HIST_BINS
    n_bins = int(np.clip(n_fd, MIN_HIST_BINS, MAX_HIST_BINS))
    return np.histogram_bin_edges(v, bins=n_bins)


def win_fraction(err_pi, err_dd) -> float:
    """Fraction of samples where PI has strictly lower error; ties count half."""
    err_pi, err_dd = np.asarray(err_pi), np.asarray(err_dd)
    return float(np.mean(err_pi < err_dd) + 0.5 * np.mean(err_pi == err_dd))


def mean_reduction_pct(err_pi, err_dd) -> float:
    dd = float(np.mean(err_dd))
    return 0.0 if dd == 0 else (dd - float(np.mean(err_pi))) / dd * 100.0


@dataclass
class SampleErrors:
    pressure_rmse: np.ndarray
    perm_rel_l2: np.ndarray

    def metric(self, name: str) -> np.ndarray:
        return self.pressure_rmse if name == "pres" else self.perm_rel_l2


@dataclass
class EvalReport:
    dd: SampleErrors
    pi: SampleErrors
    n_failed: int = 0
    name: str = ""
    win_pi: dict = field(default_factory=dict)
    win_dd: dict = field(default_factory=dict)
    reduction_pct: dict = field(default_factory=dict)
    ecdf: dict = field(default_factory=dict)
    box: dict = field(default_factory=dict)
    hist: dict = field(default_factory=dict)

    def __post_init__(self):
        for m in METRICS:
            a, b = self.pi.metric(m), self.dd.metric(m)
            if len(a) == 0:
                continue
            self.win_pi[m] = win_fraction(a, b)
            self.win_dd[m] = win_fraction(b, a)
            self.reduction_pct[m] = mean_reduction_pct(a, b)
            edges = histogram_edges(np.concatenate([a, b]))
            for model, errs in (("dd", self.dd), ("pi", self.pi)):
                vals = errs.metric(m)
                self.ecdf[model, m] = ecdf(vals)
                self.box[model, m] = box_stats(vals)
                self.hist[model, m] = histogram(vals, edges)

    @property
    def n_test(self) -> int:
        return len(self.dd.pressure_rmse)


def infer(params: MlpParams, pressures: np.ndarray, ctx: ForwardModel, coef_scale: float):
    """Predicted coefficients, log-k fields and simulated observations for each input row.

    Rows whose simulation fails come back as NaN.
    """
    k_hat = predict_coefficients(params, pressures, coef_scale)
    sim = np.full((len(k_hat), ctx.n_obs), np.nan)
    for j in range(len(k_hat)):
        try:
            sim[j] = ctx.observe_batch(k_hat[j:j + 1])[0]
        except (NumericalError, LinAlgError, FloatingPointError) as exc:
            log.warning("evaluation sample %d failed: %s", j, exc)
    return k_hat, ctx.log_k(k_hat), sim


def compare_models(dd: MlpParams, pi: MlpParams, test: Dataset, ctx: ForwardModel,
                   coef_scale: float = 0.1, name: str = "") -> EvalReport:
    """Evaluate both networks on the clean test pressures."""
    for p in (dd, pi):
        if p.n_in != ctx.n_obs or p.n_out != ctx.n_modes:
            raise DimensionMismatch("network dimensions do not match the forward model")
    true_logk = ctx.log_k(test.coeffs)
    out = {}
    for label, params in (("dd", dd), ("pi", pi)):
        _, logk, sim = infer(params, test.clean, ctx, coef_scale)
        out[label] = (pressure_rmse(sim, test.clean), perm_rel_l2(logk, true_logk))
    ok = np.isfinite(out["dd"][0]) & np.isfinite(out["pi"][0])
    return EvalReport(
        SampleErrors(out["dd"][0][ok], out["dd"][1][ok]),
        SampleErrors(out["pi"][0][ok], out["pi"][1][ok]),
        n_failed=int((~ok).sum()),
        name=name,
    )


# --- scenario grid -------------------------------------------------------------

SCENARIO_NAMES = ("LLL", "LLS", "LSL", "LSS", "SLL", "SLS", "SSL", "SSS")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    train_size: int
    n_obs: int
    corr_length: float

    @classmethod
    def decode(cls, name: str, train_sizes=(50000, 5000), obs_counts=(200, 50), lengths=(100.0, 10.0)):
        """Letters give (training size, observation count, correlation length); L=large, S=small."""
        if len(name) != 3 or any(c not in "LS" for c in name):
            raise ConfigError(f"scenario name must be three of L/S, got {name!r}")
        pick = [0 if c == "L" else 1 for c in name]
        return cls(name, int(train_sizes[pick[0]]), int(obs_counts[pick[1]]), float(lengths[pick[2]]))


def run_scenarios(specs, cfg, threads: int = 1, progress=None):
    """Train and compare DD/PI networks for each scenario spec.

    Each scenario gets its own basis (correlation length), monitoring layout
    (observation count) and datasets, all seeded from the master seed and the
    scenario name. Returns ``(reports, failures)``; a failing scenario is
    logged and skipped.
    """
    from .config import build_basis, build_context, derive_seed
    from .training import generate_dataset, train

    reports, failures = {}, {}
    for spec in specs:
        try:
            seed = lambda *s: derive_seed(cfg.seed, "scenario", spec.name, *s)  # noqa: E731
            basis = build_basis(cfg, spec.corr_length)
            ctx = build_context(cfg.replace(obs_seed=seed("obs")), basis, spec.n_obs)
            noise = cfg.train.noise_level
            tr = generate_dataset(spec.train_size, ctx, noise, seed("train"), "train", threads=threads)
            va = generate_dataset(cfg.sizes.validation, ctx, noise, seed("validation"), "validation", threads=threads)
            te = generate_dataset(cfg.sizes.test, ctx, 0.0, seed("test"), "test", threads=threads)
            models = {}
            for kind in ("data_driven", "physics_informed"):
                models[kind], _ = train(tr, va, cfg.train.replace(model_kind=kind), seed("fit"), ctx)
            reports[spec.name] = compare_models(
                models["data_driven"], models["physics_informed"], te, ctx, cfg.train.coef_scale, spec.name)
        except (NumericalError, LinAlgError, FloatingPointError, DimensionMismatch, ConfigError) as exc:
            log.error("scenario %s failed: %s", spec.name, exc)
            failures[spec.name] = str(exc)
        if progress is not None:
            progress(spec.name)
    return reports, failures


# --- CSV output -----------------------------------------------------------------

SUMMARY_COLUMNS = (
    "scenario", "n_test", "n_failed",
    "dd_pres_mean", "dd_pres_median", "pi_pres_mean", "pi_pres_median",
    "dd_perm_mean", "dd_perm_median", "pi_perm_mean", "pi_perm_median",
    "pi_wins_pres_pct", "pi_wins_perm_pct", "pi_reduces_pres_pct", "pi_reduces_perm_pct",
    "status",
)


def _f(x) -> str:
    return f"{float(x):.17g}"


def summary_row(rep: EvalReport) -> list[str]:
    if rep.n_test == 0:
        return [rep.name, "0", str(rep.n_failed)] + [""] * 12 + ["no_samples"]
    row = [rep.name, str(rep.n_test), str(rep.n_failed)]
    for m in METRICS:
        for errs in (rep.dd, rep.pi):
            v = errs.metric(m)
            row += [_f(np.mean(v)), _f(np.median(v))]
    row += [
        _f(100 * rep.win_pi["pres"]), _f(100 * rep.win_pi["perm"]),
        _f(rep.reduction_pct["pres"]), _f(rep.reduction_pct["perm"]), "ok",
    ]
    return row


def write_reports(reports: dict, out_dir, failures: dict | None = None) -> dict:
    """Write summary / per-sample / ECDF / box / histogram CSVs; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.csv" for k in ("summary", "per_sample", "ecdf", "box", "hist")}
    with open(paths["summary"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for rep in reports.values():
            w.writerow(summary_row(rep))
        for name, msg in (failures or {}).items():
            w.writerow([name] + [""] * (len(SUMMARY_COLUMNS) - 2) + [f"failed: {msg}"])
    with open(paths["per_sample"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "sample", "dd_pres_rmse", "pi_pres_rmse", "dd_perm_rel_l2", "pi_perm_rel_l2"])
        for rep in reports.values():
            for j in range(rep.n_test):
                w.writerow([rep.name, j, _f(rep.dd.pressure_rmse[j]), _f(rep.pi.pressure_rmse[j]),
                            _f(rep.dd.perm_rel_l2[j]), _f(rep.pi.perm_rel_l2[j])])
    with open(paths["ecdf"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "model", "metric", "value", "fraction"])
        for rep in reports.values():
            for (model, m), pts in rep.ecdf.items():
                for v, frac in pts:
                    w.writerow([rep.name, model, m, _f(v), _f(frac)])
    with open(paths["box"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "model", "metric", "median", "q1", "q3", "lo_whisker", "hi_whisker"])
        for rep in reports.values():
            for (model, m), b in rep.box.items():
                w.writerow([rep.name, model, m, _f(b.median), _f(b.q1), _f(b.q3), _f(b.lo_whisker), _f(b.hi_whisker)])
    with open(paths["hist"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "model", "metric", "bin_lo", "bin_hi", "count"])
        for rep in reports.values():
            for (model, m), (counts, edges) in rep.hist.items():
                for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                    w.writerow([rep.name, model, m, _f(lo), _f(hi), int(c)])
    return paths
