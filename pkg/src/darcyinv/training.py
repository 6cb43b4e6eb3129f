"""Datasets, loss functions and the data-driven / physics-informed training loops."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError

from .darcy import ForwardModel
from .errors import ConfigError, DimensionMismatch, FormatError, NumericalError
from .mlp import AdamState, MlpParams, adam_step, mlp_backward, mlp_forward, mlp_init

log = logging.getLogger(__name__)

DATA_DRIVEN = "data_driven"
PHYSICS_INFORMED = "physics_informed"
MODEL_KINDS = (DATA_DRIVEN, PHYSICS_INFORMED)

DSET_MAGIC = b"DSET"
_TABLE_HEADER = struct.Struct("<4sqqqq")

HISTORY_COLUMNS = (
    "iteration", "train_loss", "val_coef_loss", "val_pres_loss", "wall_ms",
    "train_coef_loss", "train_pres_loss",
)


@dataclass(frozen=True)
class SampleRecord:
    coeffs: np.ndarray
    clean_pressures: np.ndarray
    noisy_pressures: np.ndarray


@dataclass
class Dataset:
    """Column-stored sample records: ``coeffs (n, n_modes)``, ``clean``/``noisy`` ``(n, n_obs)``."""

    coeffs: np.ndarray
    clean: np.ndarray
    noisy: np.ndarray
    role: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        self.clean = np.atleast_2d(np.asarray(self.clean, dtype=float))
        self.noisy = np.atleast_2d(np.asarray(self.noisy, dtype=float))
        if not (len(self.coeffs) == len(self.clean) == len(self.noisy)):
            raise DimensionMismatch("dataset columns have different lengths")
        if self.clean.shape != self.noisy.shape:
            raise DimensionMismatch("clean and noisy pressures differ in shape")

    def __len__(self):
        return len(self.coeffs)

    def __getitem__(self, j) -> SampleRecord:
        return SampleRecord(self.coeffs[j], self.clean[j], self.noisy[j])

    @property
    def records(self) -> list[SampleRecord]:
        return [self[j] for j in range(len(self))]

    @property
    def n_modes(self) -> int:
        return self.coeffs.shape[1]

    @property
    def n_obs(self) -> int:
        return self.clean.shape[1]

    def subset(self, idx, role=None) -> "Dataset":
        return Dataset(self.coeffs[idx], self.clean[idx], self.noisy[idx], role or self.role, dict(self.meta))

    @classmethod
    def concat(cls, parts, role="train", meta=None) -> "Dataset":
        return cls(
            np.concatenate([d.coeffs for d in parts]),
            np.concatenate([d.clean for d in parts]),
            np.concatenate([d.noisy for d in parts]),
            role,
            meta or {"parts": [d.meta for d in parts]},
        )


def context_id(ctx: ForwardModel) -> dict:
    """Short fingerprints of the basis and monitoring layout a dataset belongs to."""
    basis = hashlib.sha1(ctx.basis.eigenvalues.tobytes() + ctx.basis.eigenvectors.tobytes()).hexdigest()[:12]
    obs = hashlib.sha1(np.asarray(ctx.obs.node_indices, dtype="<i8").tobytes()).hexdigest()[:12]
    return {"grid": [ctx.grid.nx, ctx.grid.ny], "basis_id": basis, "obs_id": obs}


def _observe_chunked(ctx: ForwardModel, coeffs: np.ndarray, threads: int = 1, chunk: int = 64) -> np.ndarray:
    starts = list(range(0, len(coeffs), chunk))

    def run(s):
        try:
            return ctx.observe_batch(coeffs[s:s + chunk])
        except (NumericalError, LinAlgError, FloatingPointError) as exc:
            for j in range(s, min(s + chunk, len(coeffs))):
                try:
                    ctx.observe_batch(coeffs[j:j + 1])
                except (NumericalError, LinAlgError, FloatingPointError):
                    raise NumericalError(f"forward solve failed for sample {j}: {exc}") from exc
            raise

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    if not parts:
        return np.empty((0, ctx.n_obs))
    return np.concatenate(parts)


def add_noise(clean: np.ndarray, noise_level: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative Gaussian noise: ``clean * (1 + noise_level * xi)``."""
    xi = rng.standard_normal(clean.shape)
    return clean * (1.0 + noise_level * xi) if noise_level > 0 else clean.copy()


def generate_dataset(
    n_samples: int,
    ctx: ForwardModel,
    noise_level: float,
    seed: int,
    role: str = "train",
    coeffs: np.ndarray | None = None,
    threads: int = 1,
) -> Dataset:
    """Draw standard-normal coefficients (unless given), simulate, and perturb.

    All random numbers come from one generator seeded with ``seed`` and are
    drawn before any solve, so the result does not depend on ``threads``.
    """
    if n_samples < 1:
        raise ConfigError("a dataset needs at least one sample")
    rng = np.random.default_rng(seed)
    if coeffs is None:
        coeffs = rng.standard_normal((n_samples, ctx.n_modes))
    else:
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (n_samples, ctx.n_modes):
            raise DimensionMismatch(f"coefficients of shape {coeffs.shape} for {n_samples} samples")
    xi = rng.standard_normal((n_samples, ctx.n_obs))
    clean = _observe_chunked(ctx, coeffs, threads)
    noisy = clean * (1.0 + noise_level * xi) if noise_level > 0 else clean.copy()
    meta = {"role": role, "seed": int(seed), "noise_level": float(noise_level), **context_id(ctx)}
    return Dataset(coeffs, clean, noisy, role, meta)


def write_table(path, magic: bytes, n_modes: int, n_obs: int, meta: dict, table: np.ndarray, extra=None):
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_TABLE_HEADER.pack(magic, len(table), n_modes, n_obs, len(blob)))
        fh.write(blob)
        if extra is not None:
            fh.write(np.ascontiguousarray(extra, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(table, dtype="<f8").tobytes())


def read_table(path, magic: bytes, n_cols_extra: int = 0, n_extra: int = 0):
    raw = Path(path).read_bytes()
    if len(raw) < _TABLE_HEADER.size or raw[:4] != magic:
        raise FormatError(f"{path}: expected a {magic.decode()} file")
    _, n, n_modes, n_obs, meta_len = _TABLE_HEADER.unpack_from(raw)
    off = _TABLE_HEADER.size
    try:
        meta = json.loads(raw[off:off + meta_len].decode())
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt metadata block") from exc
    off += meta_len
    extra = np.frombuffer(raw, "<f8", n_extra, off).copy() if n_extra else None
    off += 8 * n_extra
    width = n_modes + 2 * n_obs + n_cols_extra
    if len(raw) - off != 8 * n * width:
        raise FormatError(f"{path}: payload size does not match header")
    table = np.frombuffer(raw, "<f8", n * width, off).reshape(n, width).copy()
    return table, n_modes, n_obs, meta, extra


def save_dataset(ds: Dataset, path) -> None:
    meta = dict(ds.meta, role=ds.role)
    write_table(path, DSET_MAGIC, ds.n_modes, ds.n_obs, meta, np.hstack([ds.coeffs, ds.clean, ds.noisy]))


def load_dataset(path) -> Dataset:
    table, m, o, meta, _ = read_table(path, DSET_MAGIC)
    return Dataset(table[:, :m], table[:, m:m + o], table[:, m + o:], meta.get("role", "train"), meta)


# --- losses -----------------------------------------------------------------


def coef_loss(pred, target) -> float:
    """Mean over samples of the per-mode mean squared coefficient error."""
    pred, target = np.atleast_2d(pred), np.atleast_2d(target)
    if pred.shape != target.shape:
        raise DimensionMismatch(f"prediction {pred.shape} vs target {target.shape}")
    return float(np.mean((pred - target) ** 2))


def pressure_loss(coeff_preds, noisy_pressures, ctx: ForwardModel, return_state: bool = False):
    """Mean over samples of the per-node mean squared pressure misfit.

    Returns ``(loss, seeds)`` where ``seeds[j] = d loss / d F(k_j)``; with
    ``return_state`` the forward solutions are appended for adjoint reuse.
    """
    coeff_preds = np.atleast_2d(coeff_preds)
    target = np.atleast_2d(noisy_pressures)
    state = ctx.solve_batch(coeff_preds)
    resid = state.pressure[:, ctx.obs_nodes] - target
    loss = float(np.mean(resid**2))
    seeds = 2.0 * resid / resid.size
    if return_state:
        return loss, seeds, state
    return loss, seeds


def total_pi_loss(coef: float, pres: float, alpha_coef: float) -> float:
    if not alpha_coef > 0:
        raise ConfigError("alpha_coef must be positive")
    return pres + alpha_coef * coef


# --- training -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 5
    n_batches: int = 100
    samples_per_iteration: int = 500
    n_iterations: int = 10000
    learning_rate: float = 1e-4
    coef_scale: float = 0.1
    alpha_coef: float = 0.1
    noise_level: float = 0.1
    model_kind: str = PHYSICS_INFORMED
    validation_every: int = 10

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.batch_size * self.n_batches != self.samples_per_iteration:
            raise ConfigError("batch_size * n_batches must equal samples_per_iteration")
        positive = ("batch_size", "n_batches", "n_iterations", "learning_rate", "coef_scale",
                    "alpha_coef", "validation_every")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be non-negative")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


@dataclass
class TrainHistory:
    iteration: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    train_coef_loss: list = field(default_factory=list)
    train_pres_loss: list = field(default_factory=list)
    val_coef_loss: list = field(default_factory=list)
    val_pres_loss: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    skipped_batches: int = 0
    adam: AdamState | None = field(default=None, repr=False)

    def validated(self):
        """Indices of rows that carry validation metrics."""
        return [i for i, v in enumerate(self.val_coef_loss) if not math.isnan(v)]

    def to_csv(self, path, append: bool = False) -> None:
        new = not append or not Path(path).exists()
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(HISTORY_COLUMNS)
            for i in range(len(self.iteration)):
                w.writerow([
                    self.iteration[i],
                    *(_fmt(getattr(self, c)[i]) for c in HISTORY_COLUMNS[1:]),
                ])

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        h = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.iteration.append(int(row["iteration"]))
                for c in HISTORY_COLUMNS[1:]:
                    getattr(h, c).append(float(row[c]) if row[c] else math.nan)
        return h


def _fmt(x) -> str:
    return "" if isinstance(x, float) and math.isnan(x) else f"{x:.17g}"


class _PermutationStream:
    """Endless stream of indices: successive independent permutations of ``range(n)``."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            step = min(k, self.n - self.pos)
            out.append(self.perm[self.pos:self.pos + step])
            self.pos += step
            k -= step
        return np.concatenate(out)


def validation_losses(params: MlpParams, val: Dataset, ctx: ForwardModel, coef_scale: float):
    """Coefficient loss and pressure loss (against clean pressures) on ``val``."""
    k_hat = predict_coefficients(params, val.noisy, coef_scale)
    c_loss = coef_loss(k_hat, val.coeffs)
    pred = _observe_chunked(ctx, k_hat)
    p_loss = float(np.mean((pred - val.clean) ** 2))
    return c_loss, p_loss


def batch_loss_and_grad(params: MlpParams, xb, kb, ctx: ForwardModel | None, cfg: TrainConfig):
    """Batch loss and its gradient wrt the network weights: ``(loss, coef, pres, grads)``."""
    # the network emits s*k; both loss terms see the unscaled k_hat = out/s
    s = cfg.coef_scale
    out, cache = mlp_forward(params, xb)
    k_hat = out / s
    diff = k_hat - kb
    c_loss = coef_loss(k_hat, kb)
    g_k = 2.0 * diff / diff.size
    p_loss = math.nan
    loss = c_loss
    if cfg.model_kind == PHYSICS_INFORMED:
        p_loss, seeds, state = pressure_loss(k_hat, xb, ctx, return_state=True)
        g_k = cfg.alpha_coef * g_k + ctx.gradient_batch(state, ctx.obs_seeds(seeds))
        loss = total_pi_loss(c_loss, p_loss, cfg.alpha_coef)
    grad = g_k / s
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise FloatingPointError("non-finite loss or gradient")
    grads, _ = mlp_backward(params, cache, grad)
    return loss, c_loss, p_loss, grads


def _batch_step(params, adam, xb, kb, ctx, cfg: TrainConfig):
    loss, c_loss, p_loss, grads = batch_loss_and_grad(params, xb, kb, ctx, cfg)
    adam_step(params, grads, adam)
    return loss, c_loss, p_loss


def train(
    dataset: Dataset,
    val: Dataset | None,
    config: TrainConfig,
    seed: int,
    ctx: ForwardModel | None = None,
    params: MlpParams | None = None,
    adam: AdamState | None = None,
    start_iteration: int = 0,
    history_path=None,
    progress=None,
) -> tuple[MlpParams, TrainHistory]:
    """Run ``config.n_iterations`` iterations of mini-batch Adam.

    Each iteration takes the next ``samples_per_iteration`` indices from a
    reshuffled-per-epoch permutation, splits them into ``n_batches`` batches
    and applies one Adam step per batch. The recorded training loss is the
    mean batch loss of the iteration. ``ctx`` is required for the
    physics-informed objective and for validation pressure losses.
    """
    cfg = config
    if cfg.model_kind == PHYSICS_INFORMED and ctx is None:
        raise ConfigError("physics-informed training needs a forward model")
    if len(dataset) == 0:
        raise ConfigError("empty training set")
    if params is None:
        params = mlp_init(dataset.n_obs, dataset.n_modes, seed)
    elif params.n_in != dataset.n_obs or params.n_out != dataset.n_modes:
        raise DimensionMismatch("network dimensions do not match the dataset")
    if adam is None or not adam.m:
        adam = AdamState.fresh(params, cfg.learning_rate)
    adam.lr = cfg.learning_rate

    stream = _PermutationStream(len(dataset), np.random.default_rng([seed, start_iteration]))
    hist = TrainHistory(adam=adam)
    t0 = time.perf_counter()
    bs = cfg.batch_size
    last = start_iteration + cfg.n_iterations
    try:
        for it in range(start_iteration + 1, last + 1):
            idx = stream.take(cfg.samples_per_iteration)
            x, k = dataset.noisy[idx], dataset.coeffs[idx]
            losses, c_losses, p_losses = [], [], []
            for b in range(cfg.n_batches):
                sl = slice(b * bs, (b + 1) * bs)
                try:
                    loss, c, p = _batch_step(params, adam, x[sl], k[sl], ctx, cfg)
                except (NumericalError, LinAlgError, FloatingPointError) as exc:
                    hist.skipped_batches += 1
                    log.warning("iteration %d batch %d skipped: %s", it, b, exc)
                    continue
                losses.append(loss)
                c_losses.append(c)
                p_losses.append(p)
            if not losses:
                raise NumericalError(f"every batch of iteration {it} failed")
            hist.iteration.append(it)
            hist.train_loss.append(float(np.mean(losses)))
            hist.train_coef_loss.append(float(np.mean(c_losses)))
            hist.train_pres_loss.append(float(np.mean(p_losses)))
            vc = vp = math.nan
            if val is not None and ctx is not None and (
                it == start_iteration + 1 or it % cfg.validation_every == 0 or it == last
            ):
                vc, vp = validation_losses(params, val, ctx, cfg.coef_scale)
            hist.val_coef_loss.append(vc)
            hist.val_pres_loss.append(vp)
            hist.wall_ms.append(round((time.perf_counter() - t0) * 1e3, 3))
            if progress is not None:
                progress(it, hist)
    finally:
        if history_path is not None:
            hist.to_csv(history_path, append=start_iteration > 0)
    return params, hist


def predict_coefficients(params: MlpParams, pressures: np.ndarray, coef_scale: float) -> np.ndarray:
    """Network output mapped back to unscaled KL coefficients."""
    out, _ = mlp_forward(params, pressures)
    return out / coef_scale
