"""Critical-node quantity of interest, tail sampling and the four rare-event cases."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError
from scipy.optimize import minimize

from .darcy import ForwardModel
from .errors import ConfigError, DimensionMismatch, FormatError, NonConvergence, NumericalError
from .evaluation import EvalReport, compare_models
from .mlp import MlpParams
from .training import Dataset, TrainConfig, read_table, train, write_table

log = logging.getLogger(__name__)

TAIL_MAGIC = b"TAIL"
LOW_YIELD = 0.05
QOI_TOL = 1e-3
RARE_CASES = ("tBeB", "tBeR", "tBnReR", "tReR")


def _check_node(ctx: ForwardModel, node: int) -> int:
    node = int(node)
    if not 0 <= node < ctx.grid.n_nodes or ctx.stencil.unknown[node] < 0:
        raise ConfigError(f"critical node {node} is not an interior node")
    return node


def qoi(coeffs, ctx: ForwardModel, critical_node: int):
    """Pressure at the critical node; scalar for one vector, array for a batch."""
    node = _check_node(ctx, critical_node)
    c = np.asarray(coeffs, dtype=float)
    p = ctx.pressure_batch(np.atleast_2d(c))[:, node]
    return float(p[0]) if c.ndim == 1 else p


def qoi_batch(coeffs, ctx: ForwardModel, critical_node: int, chunk: int = 256) -> np.ndarray:
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
    node = _check_node(ctx, critical_node)
    out = np.empty(len(coeffs))
    for s in range(0, len(coeffs), chunk):
        out[s:s + chunk] = ctx.pressure_batch(coeffs[s:s + chunk])[:, node]
    return out


def qoi_and_gradient(coeffs, ctx: ForwardModel, critical_node: int):
    res = ctx.forward(np.asarray(coeffs, dtype=float))
    node = _check_node(ctx, critical_node)
    return float(res.pressure.p[node]), ctx.node_gradient(coeffs, node, res)


@dataclass(frozen=True)
class TailSample:
    coeffs: np.ndarray
    qoi: float
    weight: float = 1.0


@dataclass
class TailSet:
    """Accepted tail draws plus what is needed for the probability estimators."""

    coeffs: np.ndarray
    qoi: np.ndarray
    weights: np.ndarray
    threshold: float
    n_drawn: int
    weight_sum_all: float
    shift: np.ndarray | None = None

    def __len__(self):
        return len(self.qoi)

    def __iter__(self):
        for c, q, w in zip(self.coeffs, self.qoi, self.weights):
            yield TailSample(c, float(q), float(w))

    @property
    def acceptance(self) -> float:
        return len(self) / self.n_drawn if self.n_drawn else 0.0

    @property
    def p_plain(self) -> float:
        """Unbiased estimate ``sum(accepted weights) / n``."""
        return float(self.weights.sum()) / self.n_drawn

    @property
    def p_self_normalized(self) -> float:
        """``sum(accepted weights) / sum(all weights)``."""
        return float(self.weights.sum()) / self.weight_sum_all if self.weight_sum_all > 0 else 0.0

    def take(self, n: int) -> "TailSet":
        return TailSet(self.coeffs[:n], self.qoi[:n], self.weights[:n], self.threshold,
                       self.n_drawn, self.weight_sum_all, self.shift)


def empirical_threshold(values, quantile: float) -> float:
    if not 0 < quantile < 1:
        raise ConfigError("quantile must lie in (0, 1)")
    return float(np.quantile(np.asarray(values, dtype=float), 1.0 - quantile))


def select_tail(values, quantile: float):
    """``(threshold, mask)`` with the threshold at the empirical (1 - quantile) level."""
    values = np.asarray(values, dtype=float)
    if len(values) * quantile < 1:
        raise ConfigError(f"n * quantile = {len(values) * quantile:g} yields no tail samples")
    z = empirical_threshold(values, quantile)
    return z, values >= z


def brute_force_tail(n: int, quantile: float, ctx: ForwardModel, seed: int, critical_node: int):
    """Monte Carlo threshold at the (1 - quantile) level and the samples reaching it."""
    if n * quantile < 1:
        raise ConfigError(f"n * quantile = {n * quantile:g} yields no tail samples")
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal((n, ctx.n_modes))
    values = qoi_batch(coeffs, ctx, critical_node)
    z, keep = select_tail(values, quantile)
    tail = TailSet(coeffs[keep], values[keep], np.ones(int(keep.sum())), z, n, float(n))
    return z, tail


# --- biasing point ---------------------------------------------------------------


@dataclass(frozen=True)
class ShiftSettings:
    mu0: float = 10.0
    mu_growth: float = 10.0
    max_rounds: int = 12
    max_iter: int = 200
    margin: float = 1e-4

    def __post_init__(self):
        if not (self.mu0 > 0 and self.mu_growth > 1 and self.max_rounds >= 1 and self.max_iter >= 1):
            raise ConfigError("shift settings need mu0 > 0, mu_growth > 1 and positive iteration caps")
        if self.margin < 0:
            raise ConfigError("shift margin must be non-negative")


def minimize_norm_above(fun, z: float, dim: int, settings: ShiftSettings | None = None, start=None):
    """Smallest-norm ``k`` with ``f(k) >= z`` via a quadratic penalty with growing weight.

    ``fun(k)`` returns ``(f, grad f)``. Each round minimises
    ``0.5|k|^2 + mu * min(0, f(k) - z - margin)^2`` with L-BFGS, warm-started
    from the previous round. Raises NonConvergence (carrying the best
    feasible-most iterate) if the constraint is still violated by more than
    1e-3 after the last round.
    """
    st = settings or ShiftSettings()
    target = z + st.margin
    k = np.zeros(dim) if start is None else np.asarray(start, dtype=float).copy()
    best, best_gap = k.copy(), np.inf

    for r in range(st.max_rounds):
        mu = st.mu0 * st.mu_growth**r

        def obj(x):
            f, g = fun(x)
            gap = min(0.0, f - target)
            return 0.5 * x @ x + mu * gap * gap, x + 2.0 * mu * gap * g

        res = minimize(obj, k, jac=True, method="L-BFGS-B", options={"maxiter": st.max_iter})
        k = res.x
        f, _ = fun(k)
        gap = z - f
        if gap < best_gap:
            best, best_gap = k.copy(), gap
        if gap <= QOI_TOL:
            return k
    raise NonConvergence(f"constraint still short by {best_gap:.3g} after {st.max_rounds} rounds", best)


def find_shift(threshold: float, ctx: ForwardModel, critical_node: int,
               settings: ShiftSettings | None = None, reference=None) -> np.ndarray:
    """Most likely coefficient vector reaching ``threshold`` at the critical node.

    ``reference`` is a sample of QoI values used for the above-median check;
    without it a 257-draw Monte Carlo sample is taken.
    """
    if reference is None:
        reference = qoi_batch(np.random.default_rng(0).standard_normal((257, ctx.n_modes)), ctx, critical_node)
    if not threshold > float(np.median(reference)):
        raise ConfigError("threshold must lie above the median QoI")
    return minimize_norm_above(lambda k: qoi_and_gradient(k, ctx, critical_node), threshold, ctx.n_modes, settings)


def likelihood_ratio(k, shift) -> np.ndarray:
    """Standard-normal density over the shifted density: ``exp(-k.shift + |shift|^2/2)``."""
    shift = np.asarray(shift, dtype=float)
    return np.exp(-np.asarray(k, dtype=float) @ shift + 0.5 * shift @ shift)


def importance_sample_tail(shift, n: int, threshold: float, ctx: ForwardModel, seed: int,
                           critical_node: int) -> TailSet:
    """Draw ``k ~ N(shift, I)`` and keep draws at or above the threshold.

    Weights are the standard-normal likelihood ratio ``exp(-k.shift + |shift|^2/2)``.
    """
    shift = np.asarray(shift, dtype=float)
    if shift.shape != (ctx.n_modes,):
        raise DimensionMismatch(f"shift has shape {shift.shape}, expected ({ctx.n_modes},)")
    if n < 1:
        raise ConfigError("need at least one draw")
    rng = np.random.default_rng(seed)
    k = shift + rng.standard_normal((n, ctx.n_modes))
    values = qoi_batch(k, ctx, critical_node)
    w = likelihood_ratio(k, shift)
    keep = values >= threshold
    out = TailSet(k[keep], values[keep], w[keep], float(threshold), n, float(w.sum()), shift)
    if out.acceptance < LOW_YIELD:
        log.warning("importance sampler acceptance %.3f is below %.0f%%", out.acceptance, 100 * LOW_YIELD)
    return out


def harvest_tail(shift, n_wanted: int, threshold: float, ctx: ForwardModel, seed: int,
                 critical_node: int, batch: int = 500, max_draws: int = 200_000) -> TailSet:
    """Importance-sample in rounds until ``n_wanted`` tail draws are accepted."""
    parts = []
    drawn, total_w, got, r = 0, 0.0, 0, 0
    while got < n_wanted:
        if drawn >= max_draws:
            raise NumericalError(f"only {got} of {n_wanted} tail samples after {drawn} draws")
        round_seed = int(np.random.SeedSequence([seed, r]).generate_state(1)[0])
        ts = importance_sample_tail(shift, batch, threshold, ctx, round_seed, critical_node)
        parts.append(ts)
        drawn += ts.n_drawn
        total_w += ts.weight_sum_all
        got += len(ts)
        r += 1
    merged = TailSet(
        np.concatenate([p.coeffs for p in parts]),
        np.concatenate([p.qoi for p in parts]),
        np.concatenate([p.weights for p in parts]),
        float(threshold), drawn, total_w, np.asarray(shift, dtype=float),
    )
    return merged.take(n_wanted)


# --- tail files ----------------------------------------------------------------


@dataclass
class TailDataset:
    data: Dataset
    weights: np.ndarray
    qoi: np.ndarray
    threshold: float
    shift: np.ndarray | None
    acceptance: float


def save_tail(path, tds: TailDataset) -> None:
    ds = tds.data
    shift = tds.shift if tds.shift is not None else np.zeros(ds.n_modes)
    meta = dict(ds.meta, role=ds.role, threshold=tds.threshold, acceptance=tds.acceptance,
                has_shift=tds.shift is not None, qoi=[float(q) for q in tds.qoi])
    table = np.hstack([ds.coeffs, ds.clean, ds.noisy, np.asarray(tds.weights)[:, None]])
    write_table(path, TAIL_MAGIC, ds.n_modes, ds.n_obs, meta, table, extra=shift)


def load_tail(path, ctx: ForwardModel | None = None, critical_node: int | None = None) -> TailDataset:
    """Read a tail file; with ``ctx`` every sample is re-simulated and checked against the threshold."""
    with open(path, "rb") as fh:
        head = fh.read(24)
    n_modes = int(np.frombuffer(head[12:20], "<i8")[0]) if len(head) == 24 else 0
    table, m, o, meta, shift = read_table(path, TAIL_MAGIC, n_cols_extra=1, n_extra=n_modes)
    ds = Dataset(table[:, :m], table[:, m:m + o], table[:, m + o:m + 2 * o], meta.get("role", "train"), meta)
    weights = table[:, -1]
    if np.any(~np.isfinite(weights)) or np.any(weights <= 0):
        raise FormatError(f"{path}: tail weights must be positive and finite")
    z = float(meta["threshold"])
    q = np.asarray(meta.get("qoi", []), dtype=float)
    if ctx is not None:
        q = qoi_batch(ds.coeffs, ctx, critical_node)
        if np.any(q < z - QOI_TOL):
            raise FormatError(f"{path}: {int((q < z - QOI_TOL).sum())} samples fall below the threshold")
    return TailDataset(ds, weights, q, z, shift if meta.get("has_shift") else None, float(meta["acceptance"]))


# --- the four cases ------------------------------------------------------------


@dataclass
class RareCase:
    name: str
    train: str
    evaluate: str


CASE_TABLE = {
    "tBeB": RareCase("tBeB", "bulk", "bulk"),
    "tBeR": RareCase("tBeR", "bulk", "rare"),
    "tBnReR": RareCase("tBnReR", "bulk+rare", "rare"),
    "tReR": RareCase("tReR", "rare", "rare"),
}


@dataclass
class RareData:
    bulk_train: Dataset
    bulk_val: Dataset
    bulk_test: Dataset
    rare_train: Dataset
    rare_val: Dataset
    rare_test: Dataset


@dataclass
class RareResults:
    reports: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)

    def median(self, case: str, model: str, metric: str = "pres") -> float:
        """Median error of ``model`` (``dd``/``pi`` or the full kind name) in ``case``."""
        short = {"data_driven": "dd", "physics_informed": "pi"}.get(model, model)
        return self.reports[case].box[short, metric].median


def _train_pair(train_set, val_set, ctx, cfg: TrainConfig, seed: int):
    out = {}
    for kind in ("data_driven", "physics_informed"):
        params, _ = train(train_set, val_set, cfg.replace(model_kind=kind), seed, ctx)
        out[kind] = params
    return out


def run_rare_cases(data: RareData, ctx: ForwardModel, cfg: TrainConfig, seed: int,
                   base_models: dict | None = None, cases=RARE_CASES) -> RareResults:
    """Train (where needed) and evaluate DD/PI pairs for each rare-event case.

    ``base_models`` maps ``data_driven``/``physics_informed`` to bulk-trained
    networks; they are trained here when absent. A failing case is recorded
    and the others still run.
    """
    res = RareResults()
    if len(data.rare_train) < 1:
        raise ConfigError("rare training set is empty")
    for name in cases:
        case = CASE_TABLE[name]
        try:
            if case.train == "bulk":
                if base_models is None:
                    base_models = _train_pair(data.bulk_train, data.bulk_val, ctx, cfg, seed)
                models = base_models
            elif case.train == "rare":
                models = _train_pair(data.rare_train, data.rare_val, ctx, cfg, seed)
            else:
                mixed = Dataset.concat([data.bulk_train, data.rare_train])
                models = _train_pair(mixed, data.rare_val, ctx, cfg, seed)
            test = data.bulk_test if case.evaluate == "bulk" else data.rare_test
            res.models[name] = models
            res.reports[name] = compare_models(
                models["data_driven"], models["physics_informed"], test, ctx, cfg.coef_scale, name)
        except (NumericalError, LinAlgError, FloatingPointError, DimensionMismatch) as exc:
            log.error("rare case %s failed: %s", name, exc)
            res.failures[name] = str(exc)
    return res


def models_from(dd: MlpParams, pi: MlpParams) -> dict:
    return {"data_driven": dd, "physics_informed": pi}
