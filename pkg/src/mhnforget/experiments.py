"""Config-driven experiment runners. Each runner writes its outputs and returns their paths."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import bm, diffusion as dm, forgetting as fg, hopfield as hf, replay as rp
from .geometry import (
    MemorySet,
    RotationEnsembleSpec,
    build_equal_angular,
    build_multi_cluster,
    draw_seed,
    rotate_memories,
    sample_latent_gaussian,
    sample_rotation,
)
from .io import load_memory_set, write_csv, write_json

EXPERIMENTS = (
    "forgetting_mhn",
    "replay_mhn",
    "betac_scan",
    "bm_continual",
    "diffusion_recon",
    "diffusion_replay",
)


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


@dataclass
class RunResult:
    outputs: list[Path]
    seeds: dict[str, Any]


def _get(cfg: dict, key: str, kind=None, default=...):
    if key not in cfg:
        if default is ...:
            raise ConfigError(f"missing required key '{key}'")
        return default
    val = cfg[key]
    if kind is not None:
        try:
            val = kind(val)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"key '{key}': cannot read {val!r} as {kind.__name__}") from exc
    return val


def _section(cfg: dict, key: str) -> dict:
    sec = cfg.get(key, {}) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"'{key}' must be a mapping")
    return sec


def build_geometry(cfg: dict, base_dir: Path | None = None) -> tuple[MemorySet, np.ndarray | None]:
    g = _section(cfg, "geometry")
    kind = g.get("kind", "equal_angular")
    try:
        if kind == "equal_angular":
            X = build_equal_angular(_get(g, "N", int), _get(g, "d", int), _get(g, "c", float),
                                    bool(g.get("outlier", True)))
            return X, None
        if kind == "latent_gaussian":
            X = sample_latent_gaussian(_get(g, "N", int), _get(g, "d", int), _get(g, "c", float),
                                       _get(g, "seed", int, 0), True, bool(g.get("outlier", False)))
            return X, None
        if kind == "multi_cluster":
            return build_multi_cluster(
                [float(c) for c in _get(g, "cosines")], _get(g, "cluster_size", int),
                _get(g, "n_outliers", int, 0), _get(g, "d", int), _get(g, "seed", int, 0),
            )
        if kind == "file":
            path = Path(_get(g, "path", str))
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return load_memory_set(path), None
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"geometry: {exc}") from exc
    raise ConfigError(f"unknown geometry kind {kind!r}")


def _ensemble(cfg: dict) -> RotationEnsembleSpec:
    e = _section(cfg, "ensemble")
    try:
        return RotationEnsembleSpec(_get(e, "epsilon", float), _get(e, "count", int), _get(e, "seed", int, 0))
    except ValueError as exc:
        raise ConfigError(f"ensemble: {exc}") from exc


def _beta(cfg: dict, default=...) -> float:
    b = _get(cfg, "beta", float, default)
    if b is not None and not (np.isfinite(b) and b > 0):
        raise ConfigError("beta must be finite and positive")
    return b


def run_forgetting(cfg: dict, out: Path, base_dir=None) -> RunResult:
    X, _ = build_geometry(cfg, base_dir)
    beta = _beta(cfg)
    ens = _ensemble(cfg)
    tol = _get(cfg, "tol", float, hf.DEFAULT_TOL)
    fps = [hf.memory_fixed_point(X, beta, i, tol=tol) for i in range(X.n)]
    bad = [i for i, f in enumerate(fps) if not f.converged]
    if bad:
        raise FloatingPointError(f"fixed points from memories {bad} did not converge")
    rises = fg.rotation_rises_multi(np.array([f.state for f in fps]), X, beta, ens)
    rows = []
    for i, fp in enumerate(fps):
        rep = hf.sharpness(fp, X, beta)
        mean, se = fg.mean_and_stderr(rises[i])
        try:
            cf = fg.closed_form_rise(fp, X, beta, ens.epsilon)
        except ValueError:
            cf = float("nan")
        rows.append((i, X.roles[i], rep.energy_at_fp, rep.sharpness, mean, se, cf, fp.iterations))
    files = [write_csv(out / "forgetting.csv",
                       ["fixed_point", "role", "energy", "sharpness", "mc_rise", "mc_stderr",
                        "closed_form_rise", "iterations"], rows)]
    summary: dict[str, Any] = {"beta": beta, "epsilon": ens.epsilon, "count": ens.count}
    if len(X.cluster_indices) >= 2 and len(X.outlier_indices) >= 1:
        loc = fg.localization_diagnostics(X, beta)
        summary["localization"] = {
            "outlier_leak": loc.outlier_leak, "cluster_leak": loc.cluster_leak,
            "single_leak": loc.single_leak, "beta_c": loc.beta_c, "beta_eff": loc.beta_eff,
            "exists": loc.exists, "working_regime": loc.working_regime, "flags": loc.flags,
        }
        c = X.measured_cluster_cosine()
        if 0 < c < 1:
            gap = fg.outlier_cluster_gap(X, beta, ens.epsilon, tol)
            summary["closed_form_gap"] = gap.gap
            summary["leading_order_gap"] = gap.leading_order
    files.append(write_json(out / "summary.json", summary))
    return RunResult(files, {"ensemble": ens.master_seed})


def run_replay(cfg: dict, out: Path, base_dir=None) -> RunResult:
    X, _ = build_geometry(cfg, base_dir)
    beta = _beta(cfg)
    ens = _ensemble(cfg)
    table = rp.canonical_table(X, beta, ens)
    files = [table.to_csv(out / "replay_table.csv"), table.to_json(out / "replay_table.json")]
    r = _section(cfg, "replay")
    K = _get(r, "buffer_K", int, min(3, X.n))
    energies = rp.stored_energies(X, beta)
    ranks = {p: rp.buffer_select(X, beta, K, p, _get(r, "seed", int, 0)) for p in rp.POLICIES}
    files.append(write_csv(out / "buffers.csv", ["policy", "rank", "index", "energy"],
                           [(p, k, i, energies[i]) for p, idx in ranks.items() for k, i in enumerate(idx)]))
    return RunResult(files, {"ensemble": ens.master_seed})


def run_betac(cfg: dict, out: Path, base_dir=None) -> RunResult:
    Ns = [int(n) for n in _get(_section(cfg, "betac"), "N")]
    if not Ns or min(Ns) < 2:
        raise ConfigError("betac.N must list integers >= 2")
    rows = []
    for N in Ns:
        r = fg.beta_critical(N)
        lo, hi = r.bounds()
        rows.append((N, r.beta_c, r.m_c, r.t_c, lo, hi, r.tangency_residual, r.tc_residual))
    return RunResult([write_csv(out / "betac.csv",
                                ["N", "beta_c", "m_c", "t_c", "lower_bound", "upper_bound",
                                 "tangency_residual", "tc_residual"], rows)], {})


def _train_cfg(t: dict, seed: int) -> bm.TrainConfig:
    try:
        return bm.TrainConfig(
            learning_rate=_get(t, "learning_rate", float, 0.02),
            batch_size=_get(t, "batch_size", int, 64),
            steps=_get(t, "steps", int, 500),
            seed=seed,
            renorm_every=_get(t, "renorm_every", int, 1),
        )
    except ValueError as exc:
        raise ConfigError(f"training: {exc}") from exc


def resolve_buffer(spec, X: MemorySet) -> list[int]:
    """Buffer given as indices or as role names 'outlier', 'cluster1', 'cluster2', ..."""
    out = []
    for item in spec:
        if isinstance(item, (int, np.integer)):
            out.append(int(item))
        elif item == "outlier":
            out.append(int(X.outlier_indices[0]))
        elif isinstance(item, str) and item.startswith("cluster"):
            out.append(int(X.cluster_indices[int(item[7:]) - 1]))
        else:
            raise ConfigError(f"cannot resolve buffer entry {item!r}")
    return out


def bm_seed_run(X: MemorySet, seed: int, t: dict, beta: float) -> tuple[MemorySet, bm.BmModelConfig, bm.TrainConfig, int]:
    eps = _get(t, "rotation_epsilon", float, 0.02)
    V = sample_rotation(X.dim, eps, draw_seed(seed, 0))
    mc = bm.BmModelConfig(beta=beta, n_hidden=t.get("n_hidden"), data_scale=_get(t, "data_scale", float, 1.0),
                          init_jitter=_get(t, "init_jitter", float, 0.1))
    return rotate_memories(X, V), mc, _train_cfg(t, seed), _get(t, "task2_steps", int, _get(t, "steps", int, 500))


def run_bm(cfg: dict, out: Path, base_dir=None) -> RunResult:
    X, _ = build_geometry(cfg, base_dir)
    beta = _beta(cfg)
    t = _section(cfg, "training")
    seeds = [int(s) for s in _get(t, "seeds", None, [0, 1, 2, 3, 4])]
    buffers = t.get("buffers") or []
    files, summary = [], []
    for seed in seeds:
        X2, mc, tc, steps2 = bm_seed_run(X, seed, t, beta)
        base = bm.continual_run(X, X2, mc, tc, task2_steps=steps2)
        sub = out / f"seed_{seed}"
        files += [base.to_csv(sub / "continual.csv"),
                  bm.TrainResult(base.model_task1, base.trace_task1).save_trace(sub / "loss_task1.csv"),
                  bm.TrainResult(base.model_task2, base.trace_task2).save_trace(sub / "loss_task2.csv"),
                  base.model_task1.save(sub / "model_task1.json"),
                  base.model_task2.save(sub / "model_task2.json")]
        cl = base.role_rises("cluster")
        o = base.role_rises("outlier")
        row = [seed, o[0] if o.size else float("nan"), float(np.median(cl)) if cl.size else float("nan")]
        row.append(bool(o.size and cl.size and o[0] > np.median(cl)))
        summary.append(row)
        for b in buffers:
            idx = resolve_buffer(b, X)
            rep = bm.continual_run(X, X2, mc, tc, buffer=idx, task2_steps=steps2, baseline=base)
            name = "_".join(str(v) for v in b)
            files.append(rep.to_csv(sub / f"continual_buffer_{name}.csv"))
    files.append(write_csv(out / "summary.csv",
                           ["seed", "outlier_rise", "median_cluster_rise", "outlier_exceeds_median"], summary))
    return RunResult(files, {"training": seeds})


def _schedule(d: dict) -> dm.DiffusionSchedule:
    s = _section(d, "schedule")
    kind = s.get("kind", "ve")
    try:
        if kind in ("ve", dm.VE):
            return dm.ve_schedule(_get(s, "steps", int, 50), _get(s, "tau_min", float, 1e-3),
                                  _get(s, "tau_max", float, 1.0))
        if kind in ("vp", dm.VP):
            return dm.vp_schedule(_get(s, "steps", int, 50), _get(s, "b_min", float, 0.1),
                                  _get(s, "b_max", float, 20.0))
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from exc
    raise ConfigError(f"unknown schedule kind {kind!r}")


def _shifted(cfg: dict, X: MemorySet, d: dict) -> MemorySet:
    rot = _section(d, "rotation")
    V = sample_rotation(X.dim, _get(rot, "epsilon", float, 0.1), draw_seed(_get(rot, "seed", int, 0), 0))
    return rotate_memories(X, V)


def _mode(d: dict) -> str:
    mode = d.get("mode", "stochastic")
    if mode not in dm.MODES:
        raise ConfigError(f"diffusion.mode must be one of {dm.MODES}")
    return mode


def run_diffusion_recon(cfg: dict, out: Path, base_dir=None) -> RunResult:
    X, _ = build_geometry(cfg, base_dir)
    d = _section(cfg, "diffusion")
    sched = _schedule(d)
    X2 = _shifted(cfg, X, d)
    t_list = d.get("t_star", 45)
    t_list = [int(t) for t in (t_list if isinstance(t_list, list) else [t_list])]
    seed = _get(d, "seed", int, 0)
    gens = _get(d, "generations", int, 1)
    beta = _beta(cfg, None)
    files, curve = [], []
    for t in t_list:
        rep = dm.forgetting_vs_energy(X, X2, sched, t, gens, seed, _mode(d), beta,
                                      _get(d, "n_perm", int, 2000))
        files.append(rep.to_csv(out / f"recon_t{t}.csv"))
        curve.append((t, sched.taus[t], rep.beta, rep.correlation, rep.p_value))
    files.append(write_csv(out / "tstar_curve.csv", ["t_star", "tau", "beta", "spearman", "p_value"], curve))
    return RunResult(files, {"diffusion": seed, "rotation": _section(d, "rotation").get("seed", 0)})


def run_diffusion_replay(cfg: dict, out: Path, base_dir=None) -> RunResult:
    X, _ = build_geometry(cfg, base_dir)
    d = _section(cfg, "diffusion")
    sched = _schedule(d)
    X2 = _shifted(cfg, X, d)
    t = _get(d, "t_star", int, 38)
    K = _get(d, "K", int, 20)
    reps = _get(d, "repetitions", int, 5)
    gens = _get(d, "generations", int, 1)
    n_bins = _get(d, "n_bins", int, 8)
    policies = d.get("policies", ["high_energy", "low_energy", "random"])
    beta = _beta(cfg, None)
    files, summary = [], []
    for rep_i in range(reps):
        base = dm.recon_errors(X, X2, sched, t, gens, rep_i, _mode(d))
        for pol in policies:
            r = dm.replay_sweep(X, X2, sched, pol, K, t, gens, rep_i, _mode(d), n_bins, beta, base)
            files.append(r.to_csv(out / f"replay_{pol}_rep{rep_i}.csv"))
            for b, (m, s) in enumerate(zip(r.bin_mean(), r.bin_sum())):
                summary.append((pol, rep_i, b, m, s))
    files.append(write_csv(out / "bins.csv", ["policy", "repetition", "bin", "reduction_mean", "reduction_sum"],
                           summary))
    return RunResult(files, {"repetitions": list(range(reps))})


RUNNERS: dict[str, Callable[..., RunResult]] = {
    "forgetting_mhn": run_forgetting,
    "replay_mhn": run_replay,
    "betac_scan": run_betac,
    "bm_continual": run_bm,
    "diffusion_recon": run_diffusion_recon,
    "diffusion_replay": run_diffusion_replay,
}


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(exp: dict) -> dict:
    if not isinstance(exp, dict):
        raise ConfigError("each experiment must be a mapping")
    kind = exp.get("experiment")
    if kind not in EXPERIMENTS:
        raise ConfigError(f"'experiment' must be one of {EXPERIMENTS}, got {kind!r}")
    if "name" not in exp or not str(exp["name"]).strip():
        raise ConfigError("every experiment needs a non-empty 'name'")
    if any(sep in str(exp["name"]) for sep in "/\\") or str(exp["name"]).startswith("."):
        raise ConfigError(f"experiment name {exp['name']!r} is not a plain directory name")
    return exp
