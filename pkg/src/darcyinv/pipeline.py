"""Experiment commands: each writes artifacts plus the resolved config and a manifest."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import (
    ExperimentConfig,
    build_basis,
    build_context,
    critical_node,
    derive_seed,
)
from .errors import ConfigError, FormatError
from .evaluation import SCENARIO_NAMES, ScenarioSpec, compare_models, run_scenarios, write_reports
from .mlp import load_checkpoint, save_checkpoint
from .random_field import save_basis
from .rare_events import (
    RareData,
    ShiftSettings,
    TailDataset,
    brute_force_tail,
    find_shift,
    harvest_tail,
    models_from,
    run_rare_cases,
    save_tail,
)
from .training import MODEL_KINDS, TrainHistory, generate_dataset, load_dataset, save_dataset, train

log = logging.getLogger(__name__)

ROLES = ("train", "validation", "test")


@dataclass
class RunManifest:
    config_hash: str
    artifacts: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    versions: dict = field(default_factory=dict)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _versions() -> dict:
    return {"darcyinv": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


class Run:
    """Output directory bound to one resolved config."""

    def __init__(self, cfg: ExperimentConfig, out=None):
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.started = _now()
        cfg_path = self.out / "config.json"
        if cfg_path.exists():
            try:
                old = json.loads(cfg_path.read_text())
            except ValueError as exc:
                raise FormatError(f"{cfg_path}: unreadable archived config") from exc
            if old != json.loads(cfg.to_json()):
                raise ConfigError(f"{self.out} already holds a run with a different config")
        cfg_path.write_text(cfg.to_json() + "\n")

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def seed(self, *stream) -> int:
        return derive_seed(self.cfg.seed, *stream)

    def finish(self, artifacts: dict) -> Path:
        """Merge ``artifacts`` into manifest.json (dropping entries whose files vanished)."""
        mpath = self.out / "manifest.json"
        known = {}
        if mpath.exists():
            try:
                known = json.loads(mpath.read_text()).get("artifacts", {})
            except ValueError:
                known = {}
        known.update({k: str(Path(v).relative_to(self.out)) for k, v in artifacts.items()})
        known = {k: v for k, v in sorted(known.items()) if (self.out / v).exists()}
        man = RunManifest(self.cfg.hash(), known, self.started, _now(), _versions())
        mpath.write_text(json.dumps(asdict(man), indent=2) + "\n")
        return mpath


def _default_size(cfg: ExperimentConfig, role: str) -> int:
    return getattr(cfg.sizes, role)


def _noise_for(cfg: ExperimentConfig, role: str) -> float:
    return 0.0 if role == "test" else cfg.train.noise_level


def cmd_basis(cfg: ExperimentConfig, out=None, corr_length: float | None = None) -> Path:
    run = Run(cfg, out)
    basis = build_basis(cfg, corr_length)
    name = "basis.klb" if corr_length is None else f"basis_l{corr_length:g}.klb"
    path = run.path(name)
    save_basis(basis, path)
    log.info("basis: %d modes, %.3f of the variance", basis.n_modes, basis.energy_fraction)
    run.finish({name: path})
    return path


def cmd_gen(cfg: ExperimentConfig, role: str, n: int | None = None, out=None, threads: int = 1) -> Path:
    if role not in ROLES:
        raise ConfigError(f"role must be one of {ROLES}")
    n = _default_size(cfg, role) if n is None else n
    if n < 1:
        raise ConfigError("a dataset needs at least one sample")
    run = Run(cfg, out)
    ctx = build_context(cfg)
    ds = generate_dataset(n, ctx, _noise_for(cfg, role), run.seed("data", role), role, threads=threads)
    path = run.path("data", f"{role}.dset")
    save_dataset(ds, path)
    run.finish({f"data/{role}": path})
    return path


def _dataset(run: Run, role: str, threads: int = 1):
    """Load ``data/<role>.dset`` or generate it with the standard seed."""
    path = run.out / "data" / f"{role}.dset"
    if path.exists():
        return load_dataset(path)
    cfg = run.cfg
    ds = generate_dataset(_default_size(cfg, role), build_context(cfg), _noise_for(cfg, role),
                          run.seed("data", role), role, threads=threads)
    save_dataset(ds, run.path("data", f"{role}.dset"))
    return ds


def _history_tail(path: Path) -> int:
    if not path.exists():
        return 0
    h = TrainHistory.from_csv(path)
    return h.iteration[-1] if h.iteration else 0


def cmd_train(cfg: ExperimentConfig, model_kind: str, out=None, resume: bool = False,
              init=None, iterations: int | None = None, threads: int = 1, progress=None):
    """Train one network; returns ``(checkpoint path, history path)``.

    ``resume`` continues from this kind's own checkpoint and history;
    ``init`` starts from another checkpoint's weights with a fresh optimizer
    (data-driven pretraining followed by physics-informed fine-tuning).
    """
    if model_kind not in MODEL_KINDS:
        raise ConfigError(f"model kind must be one of {MODEL_KINDS}")
    if resume and init is not None:
        raise ConfigError("choose either resume or init, not both")
    run = Run(cfg, out)
    ctx = build_context(cfg)
    tr = _dataset(run, "train", threads)
    va = _dataset(run, "validation", threads)
    tcfg = cfg.train.replace(model_kind=model_kind)
    if iterations is not None:
        tcfg = tcfg.replace(n_iterations=iterations)
    ckpt = run.path("models", f"{model_kind}.mlp")
    hist_path = run.path("models", f"{model_kind}_history.csv")
    params = adam = None
    start = 0
    if resume:
        if not ckpt.exists():
            raise FormatError(f"{ckpt}: no checkpoint to resume from")
        params, adam = load_checkpoint(ckpt)
        start = _history_tail(hist_path)
    elif init is not None:
        params, _ = load_checkpoint(init)
    if start == 0 and hist_path.exists():
        hist_path.unlink()
    params, hist = train(tr, va, tcfg, run.seed("fit"), ctx, params, adam, start, hist_path, progress)
    save_checkpoint(ckpt, params, hist.adam)
    if hist.skipped_batches:
        log.warning("%d batches skipped during training", hist.skipped_batches)
    run.finish({f"models/{model_kind}": ckpt, f"models/{model_kind}_history": hist_path,
                "data/train": run.out / "data" / "train.dset", "data/validation": run.out / "data" / "validation.dset"})
    return ckpt, hist_path


def cmd_eval(cfg: ExperimentConfig, out=None, dd=None, pi=None, test=None, threads: int = 1) -> dict:
    run = Run(cfg, out)
    dd = Path(dd) if dd is not None else run.out / "models" / "data_driven.mlp"
    pi = Path(pi) if pi is not None else run.out / "models" / "physics_informed.mlp"
    for p in (dd, pi):
        if not p.exists():
            raise FileNotFoundError(f"{p}: checkpoint not found")
    te = load_dataset(test) if test is not None else _dataset(run, "test", threads)
    ctx = build_context(cfg)
    rep = compare_models(load_checkpoint(dd)[0], load_checkpoint(pi)[0], te, ctx, cfg.train.coef_scale, "base")
    paths = write_reports({"base": rep}, run.out / "reports")
    arts = {f"reports/{k}": v for k, v in paths.items()}
    if test is None:
        arts["data/test"] = run.out / "data" / "test.dset"
    run.finish(arts)
    return paths


def scenario_specs(cfg: ExperimentConfig, names=None) -> list[ScenarioSpec]:
    sc = cfg.scenarios
    names = sc.names if names is None else names
    return [ScenarioSpec.decode(n, sc.train_sizes, sc.obs_counts, sc.corr_lengths) for n in names]


def cmd_scenarios(cfg: ExperimentConfig, out=None, names=None, threads: int = 1, progress=None) -> dict:
    run = Run(cfg, out)
    reports, failures = run_scenarios(scenario_specs(cfg, names), cfg, threads, progress)
    paths = write_reports(reports, run.out / "scenarios", failures)
    run.finish({f"scenarios/{k}": v for k, v in paths.items()})
    return paths


def _rare_datasets(run: Run, ctx, node, threads: int = 1):
    cfg, r = run.cfg, run.cfg.rare
    z, bf = brute_force_tail(r.n_bruteforce, r.quantile, ctx, run.seed("rare", "bruteforce"), node)
    if r.threshold is not None:
        z = float(r.threshold)
    shift = find_shift(z, ctx, node, r.shift)
    sizes = {"train": r.n_train, "validation": r.n_validation, "test": r.n_test}
    tail = harvest_tail(shift, sum(sizes.values()), z, ctx, run.seed("rare", "importance"), node,
                        r.draw_batch, r.max_draws)
    out, paths, start = {}, {}, 0
    for role, n in sizes.items():
        sl = slice(start, start + n)
        start += n
        ds = generate_dataset(n, ctx, _noise_for(cfg, role), run.seed("rare", "data", role), role,
                              coeffs=tail.coeffs[sl], threads=threads)
        tds = TailDataset(ds, tail.weights[sl], tail.qoi[sl], z, shift, tail.acceptance)
        path = run.path("rare", f"{role}.tail")
        save_tail(path, tds)
        out[role], paths[f"rare/{role}"] = ds, path
    bf_ds = generate_dataset(len(bf), ctx, cfg.train.noise_level, run.seed("rare", "data", "bruteforce"),
                             "bruteforce", coeffs=bf.coeffs, threads=threads)
    path = run.path("rare", "bruteforce.tail")
    save_tail(path, TailDataset(bf_ds, bf.weights, bf.qoi, z, None, 1.0))
    paths["rare/bruteforce"] = path
    info = {"threshold": z, "critical_node": int(node), "shift_norm": float(np.linalg.norm(shift)),
            "acceptance": tail.acceptance, "n_drawn": tail.n_drawn,
            "p_tail_plain": tail.p_plain, "p_tail_self_normalized": tail.p_self_normalized,
            "n_bruteforce_tail": len(bf)}
    return out, paths, info


def cmd_rare(cfg: ExperimentConfig, out=None, threads: int = 1):
    """Tail sampling plus the four train/evaluate cases; reuses base checkpoints when present."""
    run = Run(cfg, out)
    ctx = build_context(cfg)
    node = critical_node(cfg)
    rare, paths, info = _rare_datasets(run, ctx, node, threads)
    base = None
    dd, pi = (run.out / "models" / f"{k}.mlp" for k in MODEL_KINDS)
    if dd.exists() and pi.exists():
        base = models_from(load_checkpoint(dd)[0], load_checkpoint(pi)[0])
    data = RareData(_dataset(run, "train", threads), _dataset(run, "validation", threads),
                    _dataset(run, "test", threads), rare["train"], rare["validation"], rare["test"])
    res = run_rare_cases(data, ctx, cfg.train, run.seed("fit"), base)
    rep_paths = write_reports(res.reports, run.out / "rare", res.failures)
    info_path = run.path("rare", "sampling.json")
    info_path.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    paths.update({f"rare/{k}": v for k, v in rep_paths.items()})
    paths["rare/sampling"] = info_path
    run.finish(paths)
    return res, rep_paths, info


def cmd_report(out) -> str:
    """Plain-text digest of every summary CSV under ``out``."""
    out = Path(out)
    files = sorted(out.rglob("summary.csv"))
    if not files:
        raise FileNotFoundError(f"no summary.csv under {out}")
    lines = []
    for f in files:
        lines.append(f"== {f.parent.relative_to(out) if f.parent != out else '.'}")
        with open(f, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["status"] != "ok":
                    lines.append(f"{row['scenario']:>8}  {row['status']}")
                    continue
                lines.append(
                    f"{row['scenario']:>8}  n={row['n_test']:>4}  pres DD {float(row['dd_pres_mean']):.4f}"
                    f" PI {float(row['pi_pres_mean']):.4f}  PI wins {float(row['pi_wins_pres_pct']):5.1f}%"
                    f"  reduces {float(row['pi_reduces_pres_pct']):6.1f}%  perm DD {float(row['dd_perm_mean']):.3f}"
                    f" PI {float(row['pi_perm_mean']):.3f}"
                )
    return "\n".join(lines)


__all__ = [
    "RunManifest", "Run", "cmd_basis", "cmd_gen", "cmd_train", "cmd_eval", "cmd_scenarios",
    "cmd_rare", "cmd_report", "scenario_specs", "SCENARIO_NAMES",
]
