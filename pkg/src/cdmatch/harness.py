"""Experiment configuration and the train / optimize / sweep / evaluate / report pipeline.

Everything an invocation produces lives under ``cfg.out``::

    checkpoints/{uncond,cond,cm}.json   trained models
    runs/<method>/run_XX.json           one artifact per restart
    runs/<method>/evaluation.csv        L2-GMM and distance to x* per run
    summary.csv                         top-k table (deterministic, no timings)
    timing.csv                          wall-clock columns of the same table
    ecdf_<method>.csv                   empirical CDF of L2-GMM over runs
    sweep/*.csv                         beta-sweep table, histograms, densities
    diagnostics/*.csv                   estimator and fidelity checks
"""

from __future__ import annotations

import csv
import json
import logging
import time
import zlib
from contextlib import contextmanager
from pathlib import Path
from typing import Literal

import numpy as np
from filelock import FileLock, Timeout
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import consistency as cmod
from . import diagnostics as diag
from . import gmm
from .diffusion import DiffusionModel, NoiseSchedule, Normalizer, TrainConfig, teacher_sample, train_ddpm
from .guidance import (AllRunsFailed, GuidanceConfig, GuidanceRun, SampleGuide, cdmo, cdms_sweep,
                       make_sampler, sweep_config)
from .losses import KernelSpec, LossSpec
from .nets import load_json, save_json

log = logging.getLogger(__name__)

METHODS = ("mlgd-f", "mlgd-teacher")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration (CLI exit code 2)."""


class RunFailure(RuntimeError):
    """A pipeline stage could not produce its result (CLI exit code 3)."""


# ---- configuration

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NetBudget(_Strict):
    blocks: int = Field(3, ge=1)
    units: int = Field(128, ge=1)
    epochs: int = Field(1000, ge=1)
    batch_size: int = Field(256, ge=1)
    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(1e-4, ge=0)


class ScheduleSpec(_Strict):
    kind: Literal["cosine", "linear"] = "cosine"
    T: int = Field(100, ge=1)

    def build(self) -> NoiseSchedule:
        return NoiseSchedule(self.kind, self.T)


class CmSpec(NetBudget):
    s0: int = 10
    s1: int = 1280
    sampling_levels: list[float] = list(cmod.DEFAULT_LEVELS)


class SweepSpec(_Strict):
    betas: list[float] = [0.0, 10.0, 100.0, 1000.0]
    n_samples: int = Field(2000, ge=1)
    ddim_steps: int = Field(10, ge=1)
    clip: float | None = 0.5
    schedule: ScheduleSpec = ScheduleSpec(kind="linear", T=999)
    prior: NetBudget = NetBudget()
    histogram_bins: int = Field(60, ge=1)


class DiagnoseSpec(_Strict):
    concentration_n: list[int] = [25, 50, 100, 200, 400]
    concentration_repeats: int = 200
    gradient_n: list[int] = [25, 50, 100, 200, 400]
    gradient_repeats: int = 200
    memory_K: list[int] = [5, 10, 15]
    memory_n_cond: int = 64
    fidelity_inputs: int = 100
    fidelity_directions: int = 10
    counterexample_eps: list[float] = [0.2, 0.1, 0.05]
    bootstrap: int = 1000


class ExperimentConfig(_Strict):
    setting: Literal["2D", "5D", "10D", "toy"] = "2D"
    scale: Literal["desk", "paper"] = "desk"
    seed: int = 0
    runs: int = Field(25, ge=1)
    top_k: int = Field(10, ge=1)
    out: str = "results"
    normalizer_n: int = Field(100_000, ge=2)
    schedule: ScheduleSpec = ScheduleSpec()
    uncond: NetBudget = NetBudget()
    cond: NetBudget = NetBudget()
    cm: CmSpec = CmSpec()
    x0_clip: float | None = 3.0
    guidance: dict = {}
    teacher_steps: int = Field(10, ge=1)
    workers: int = Field(1, ge=1)
    sweep: SweepSpec = SweepSpec()
    diagnose: DiagnoseSpec = DiagnoseSpec()

    @field_validator("guidance")
    @classmethod
    def _check_guidance(cls, v: dict) -> dict:
        try:
            GuidanceConfig(**v)
        except (TypeError, ValueError) as e:
            raise ValueError(f"invalid guidance block: {e}") from e
        return v

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def guidance_config(self, method: str) -> GuidanceConfig:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
        g = dict(self.guidance)
        g["restarts"] = self.runs
        if method == "mlgd-teacher":
            g["inner"] = "teacher"
            g["teacher_steps"] = self.teacher_steps
        elif g.get("inner") == "teacher":
            g["inner"] = "cm_single"
        return GuidanceConfig(**g)

    def checkpoint(self, name: str) -> Path:
        return self.out_dir / "checkpoints" / f"{name}.json"


def _budgets(scale: str, setting: str) -> dict:
    """Network sizes and training budgets per scale preset."""
    if scale == "paper":
        blocks, units, ep, bs = {"2D": (3, 128, 20_000, 1024), "toy": (3, 128, 20_000, 1024),
                                 "5D": (6, 512, 40_000, 4096), "10D": (8, 512, 20_000, 4096)}[setting]
        cm_ep = 40_000 if setting == "10D" else ep
        net = dict(blocks=blocks, units=units, epochs=ep, batch_size=bs, lr=1e-4)
        return {"uncond": net, "cond": net, "cm": {**net, "epochs": cm_ep},
                "sweep": {"prior": dict(net, epochs=20_000)},
                "guidance": {"T_outer": 100, "n_mc": 3 if setting in ("2D", "toy") else 5}}
    # desk: shorter schedules, smaller batches and a larger learning rate
    big = setting in ("5D", "10D")
    net = dict(blocks=3, units=128, epochs=6000, batch_size=256, lr=2e-3)
    cond = dict(net, epochs=20_000 if not big else 12_000)
    cm = dict(net, epochs=20_000 if not big else 12_000, lr=1e-3)
    return {"uncond": net, "cond": cond, "cm": cm,
            "sweep": {"prior": dict(net, epochs=6000)},
            "guidance": {"T_outer": 50, "n_mc": 3, "zeta": 0.3, "clip": 1.0}}


def preset(scale: str = "desk", setting: str = "2D") -> dict:
    if scale not in ("desk", "paper"):
        raise ConfigError(f"unknown scale {scale!r}")
    if setting not in gmm.SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}")
    return {"setting": setting, "scale": scale, **_budgets(scale, setting)}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _validation_message(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """File values override the preset; keyword overrides (CLI flags) override both.

    The preset is chosen by ``scale``/``setting`` from the overrides or the file.
    """
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: not valid JSON ({e})") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be an object")
    over = {k: v for k, v in overrides.items() if v is not None}
    scale = over.get("scale", raw.get("scale", "desk"))
    setting = over.get("setting", raw.get("setting", "2D"))
    merged = _merge(_merge(preset(scale, setting), raw), over)
    try:
        return ExperimentConfig(**merged)
    except ValidationError as e:
        raise ConfigError(_validation_message(e)) from e


# ---- seeds, locking, small io helpers

def stream(seed: int, name: str) -> np.random.SeedSequence:
    """Named child seed: the same (seed, name) always gives the same stream."""
    return np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(name.encode()),))


@contextmanager
def locked(out: Path):
    """Exclusive ownership of an output directory for the duration of a command."""
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as e:
        raise RunFailure(f"{out} is in use by another process") from e
    try:
        yield
    finally:
        lock.release()


def write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as f:
        return list(csv.DictReader(f))


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _load_model(path: Path, kind: str):
    if not path.exists():
        raise RunFailure(f"missing checkpoint {path}; run the matching train-* command first")
    d = load_json(path)
    if d.get("kind") != kind:
        raise RunFailure(f"{path} holds a {d.get('kind')!r} model, expected {kind!r}")
    return DiffusionModel.from_dict(d) if kind == "ddpm" else cmod.ConsistencyModel.from_dict(d)


# ---- training

def _normalizers(bench: gmm.Benchmark, n: int, seed: np.random.SeedSequence) -> tuple[Normalizer, Normalizer]:
    xs, ys = bench.sample_joint(n, np.random.default_rng(seed))
    return Normalizer.fit(xs), Normalizer.fit(ys)


def _progress(name: str):
    return lambda step, loss: log.info("%s step %d loss %.5f", name, step, loss)


def train_uncond(cfg: ExperimentConfig, bench: gmm.Benchmark | None = None) -> Path:
    bench = bench or gmm.build_benchmark(cfg.setting)
    ss = stream(cfg.seed, "train-uncond")
    rng = np.random.default_rng(ss)
    xn, _ = _normalizers(bench, cfg.normalizer_n, stream(cfg.seed, "normalizers"))
    b = cfg.uncond
    model = DiffusionModel.create(bench.x_dim, cfg.schedule.build(), xn, None, b.blocks, b.units, rng=rng)
    tc = TrainConfig(b.epochs, b.batch_size, b.lr, b.weight_decay, cfg_dropout=0.0)
    t0 = time.perf_counter()
    curve = train_ddpm(lambda n, r: (bench.sample_joint(n, r)[0],), model, tc, rng, _progress("uncond"))
    model.meta.update({"setting": cfg.setting, "role": "uncond", "seed": cfg.seed,
                       "final_loss": float(np.mean(curve[-50:]))})
    log.info("uncond trained in %.1fs", time.perf_counter() - t0)
    save_json(model.to_dict(), cfg.checkpoint("uncond"))
    return cfg.checkpoint("uncond")


def train_cond(cfg: ExperimentConfig, bench: gmm.Benchmark | None = None) -> Path:
    bench = bench or gmm.build_benchmark(cfg.setting)
    rng = np.random.default_rng(stream(cfg.seed, "train-cond"))
    xn, yn = _normalizers(bench, cfg.normalizer_n, stream(cfg.seed, "normalizers"))
    b = cfg.cond
    model = DiffusionModel.create(bench.y_dim, cfg.schedule.build(), yn, xn, b.blocks, b.units, rng=rng,
                                  x0_clip=cfg.x0_clip)
    tc = TrainConfig(b.epochs, b.batch_size, b.lr, b.weight_decay)
    curve = train_ddpm(lambda n, r: bench.sample_joint(n, r), model, tc, rng, _progress("cond"))
    model.meta.update({"setting": cfg.setting, "role": "cond", "seed": cfg.seed,
                       "final_loss": float(np.mean(curve[-50:]))})
    save_json(model.to_dict(), cfg.checkpoint("cond"))
    return cfg.checkpoint("cond")


def train_cm(cfg: ExperimentConfig, bench: gmm.Benchmark | None = None) -> Path:
    bench = bench or gmm.build_benchmark(cfg.setting)
    rng = np.random.default_rng(stream(cfg.seed, "train-cm"))
    xn, yn = _normalizers(bench, cfg.normalizer_n, stream(cfg.seed, "normalizers"))
    c = cfg.cm
    ict = cmod.IctConfig(s0=c.s0, s1=c.s1, sampling_levels=tuple(c.sampling_levels), epochs=c.epochs,
                         batch_size=c.batch_size, lr=c.lr, weight_decay=c.weight_decay)
    model = cmod.ConsistencyModel.create(bench.y_dim, ict, yn, xn, c.blocks, c.units, rng=rng)
    cmod.ict_train(lambda n, r: bench.sample_joint(n, r), model, rng, _progress("cm"))
    model.meta.update({"setting": cfg.setting, "role": "cm", "seed": cfg.seed})
    save_json(model.to_dict(), cfg.checkpoint("cm"))
    return cfg.checkpoint("cm")


# ---- optimization and evaluation

def evaluate_point(bench: gmm.Benchmark, x) -> tuple[float, float]:
    """(L2-GMM between P(Y|X=x) and the target, Euclidean distance to x*)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    l2 = gmm.l2_gmm_distance(bench.conditional(x), bench.target)
    return l2, float(np.linalg.norm(x - bench.x_star))


def run_dir(cfg: ExperimentConfig, method: str) -> Path:
    return cfg.out_dir / "runs" / method


def optimize(cfg: ExperimentConfig, method: str) -> list[GuidanceRun]:
    """R restarts of one method; every run (failed or not) is persisted."""
    bench = gmm.build_benchmark(cfg.setting)
    gcfg = cfg.guidance_config(method)
    prior = _load_model(cfg.checkpoint("uncond"), "ddpm")
    if method == "mlgd-teacher":
        sampler = make_sampler(gcfg, teacher=_load_model(cfg.checkpoint("cond"), "ddpm"))
    else:
        sampler = make_sampler(gcfg, cm=_load_model(cfg.checkpoint("cm"), "ict"))
    guide = SampleGuide(sampler, bench.target, gcfg.loss, gcfg.n_cond, gcfg.n_target)
    # both methods share restart seeds (common random numbers)
    master = int(stream(cfg.seed, "optimize").generate_state(1)[0])
    try:
        res = cdmo(prior, guide, gcfg, master, method=method, workers=cfg.workers)
    except AllRunsFailed as e:
        raise RunFailure(str(e)) from e
    d = run_dir(cfg, method)
    d.mkdir(parents=True, exist_ok=True)
    for old in d.glob("run_*.json"):
        old.unlink()
    by_seed = sorted(res.runs, key=lambda r: r.seed)
    for i, r in enumerate(by_seed):
        save_json(r.to_dict(), d / f"run_{i:02d}.json")
    return by_seed


def load_runs(cfg: ExperimentConfig, method: str) -> list[GuidanceRun]:
    files = sorted(run_dir(cfg, method).glob("run_*.json"))
    return [GuidanceRun.from_dict(load_json(f)) for f in files]


def evaluate(cfg: ExperimentConfig, method: str) -> list[dict]:
    bench = gmm.build_benchmark(cfg.setting)
    runs = load_runs(cfg, method)
    if not runs:
        raise RunFailure(f"no runs for {method} under {run_dir(cfg, method)}")
    rows = []
    for r in runs:
        row = {"seed": ":".join(map(str, r.seed)), "failed": r.failed, "final_loss": r.final_loss,
               "wall_time": r.wall_time, "l2_gmm": None, "l2_xstar": None}
        if not r.failed:
            row["l2_gmm"], row["l2_xstar"] = evaluate_point(bench, r.x0_final)
        rows.append(row)
    header = ["seed", "failed", "final_loss", "l2_gmm", "l2_xstar"]
    write_csv(run_dir(cfg, method) / "evaluation.csv", header,
              [[row["seed"], int(row["failed"])] + ["" if row[k] is None else _fmt(row[k])
                                                  for k in header[2:]] for row in rows])
    return rows


def select_top(rows: list[dict], k: int) -> list[dict]:
    """Best k successful runs by re-evaluated loss; ties broken by seed so input order never matters."""
    ok = [r for r in rows if not r["failed"]]
    return sorted(ok, key=lambda r: (r["final_loss"], r["seed"]))[:k]


def ecdf_export(values) -> list[tuple[float, float]]:
    """Empirical CDF as (value, cumulative fraction) with one point per distinct value."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise ValueError("ecdf of an empty sample")
    uniq, counts = np.unique(v, return_counts=True)
    return list(zip(uniq.tolist(), (np.cumsum(counts) / v.size).tolist()))


def _mean_std(vals: list[float]) -> tuple[float, float]:
    a = np.asarray(vals, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def report(cfg: ExperimentConfig) -> list[dict]:
    """Aggregate every evaluated method into summary.csv, timing.csv and ECDF files."""
    table, timing = [], []
    for method in METHODS:
        if not run_dir(cfg, method).is_dir() or not any(run_dir(cfg, method).glob("run_*.json")):
            continue
        rows = evaluate(cfg, method)
        ok = [r for r in rows if not r["failed"]]
        if not ok:
            raise RunFailure(f"all runs of {method} failed")
        for subset, sel in (("all", ok), (f"top{cfg.top_k}", select_top(rows, cfg.top_k))):
            g, gs = _mean_std([r["l2_gmm"] for r in sel])
            d, ds = _mean_std([r["l2_xstar"] for r in sel])
            table.append({"subset": subset, "method": method, "n": len(sel), "l2_gmm_mean": g,
                          "l2_gmm_std": gs, "l2_xstar_mean": d, "l2_xstar_std": ds,
                          "failed": len(rows) - len(ok)})
            t, ts = _mean_std([r["wall_time"] for r in sel])
            timing.append([subset, method, len(sel), _fmt(t), _fmt(ts)])
        write_csv(cfg.out_dir / f"ecdf_{method}.csv", ["l2_gmm", "fraction"],
                  [[_fmt(a), _fmt(b)] for a, b in ecdf_export([r["l2_gmm"] for r in ok])])
    if not table:
        raise RunFailure(f"no runs found under {cfg.out_dir / 'runs'}")
    keys = ["subset", "method", "n", "l2_gmm_mean", "l2_gmm_std", "l2_xstar_mean", "l2_xstar_std", "failed"]
    write_csv(cfg.out_dir / "summary.csv", keys,
              [[_fmt(r[k]) if isinstance(r[k], float) else r[k] for k in keys] for r in table])
    write_csv(cfg.out_dir / "timing.csv", ["subset", "method", "n", "time_mean", "time_std"], timing)
    return table


# ---- beta sweep

def train_sweep_prior(cfg: ExperimentConfig) -> Path:
    bench = gmm.build_benchmark("toy")
    rng = np.random.default_rng(stream(cfg.seed, "train-sweep-prior"))
    xn, _ = _normalizers(bench, cfg.normalizer_n, stream(cfg.seed, "normalizers-toy"))
    b = cfg.sweep.prior
    sch = cfg.sweep.schedule
    model = DiffusionModel.create(1, NoiseSchedule(sch.kind, sch.T), xn, None, b.blocks, b.units, rng=rng)
    tc = TrainConfig(b.epochs, b.batch_size, b.lr, b.weight_decay, cfg_dropout=0.0)
    train_ddpm(lambda n, r: (bench.sample_joint(n, r)[0],), model, tc, rng, _progress("sweep-prior"))
    model.meta.update({"setting": "toy", "role": "sweep-prior", "seed": cfg.seed})
    save_json(model.to_dict(), cfg.checkpoint("sweep_prior"))
    return cfg.checkpoint("sweep_prior")


def sweep_beta(cfg: ExperimentConfig) -> list[dict]:
    bench = gmm.build_benchmark("toy")
    path = cfg.checkpoint("sweep_prior")
    if not path.exists():
        train_sweep_prior(cfg)
    prior = _load_model(path, "ddpm")
    s = cfg.sweep
    gcfg = sweep_config(T_outer=s.ddim_steps, clip=s.clip)
    seed = int(stream(cfg.seed, "sweep").generate_state(1)[0])
    try:
        res = cdms_sweep(prior, bench, s.betas, s.n_samples, seed, gcfg)
    except FloatingPointError as e:
        raise RunFailure(str(e)) from e
    out = cfg.out_dir / "sweep"
    rows = res.table()
    write_csv(out / "sweep.csv", ["beta", "w1", "mean", "std", "n"],
              [[_fmt(r["beta"]), _fmt(r["w1"]), _fmt(r["mean"]), _fmt(r["std"]), r["n"]] for r in rows])
    edges = np.linspace(res.grid[0], res.grid[-1], s.histogram_bins + 1)
    hist_rows = []
    for b in res.betas:
        counts, _ = np.histogram(res.samples[b], bins=edges)
        hist_rows += [[_fmt(b), _fmt(lo), _fmt(hi), int(c)] for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    write_csv(out / "histograms.csv", ["beta", "bin_lo", "bin_hi", "count"], hist_rows)
    write_csv(out / "densities.csv", ["x"] + [f"beta_{_fmt(b)}" for b in res.betas],
              [[_fmt(x)] + [_fmt(res.densities[b][i]) for b in res.betas] for i, x in enumerate(res.grid)])
    return rows


# ---- diagnostics

def _slice_joint(bench: gmm.Benchmark, rng: np.random.Generator):
    """A single Gaussian component of the benchmark joint, used where an exact sampler is needed."""
    k = int(np.argmax(bench.joint.weights))
    comp = gmm.GaussianMixture([1.0], bench.joint.means[k:k + 1], bench.joint.covariances[k:k + 1])
    return comp, diag.GaussianConditionalSampler(comp, bench.split)


def diagnose(cfg: ExperimentConfig) -> dict:
    """Concentration, gradient bias/variance, tape-size ratios and fidelity gaps; CSVs under diagnostics/."""
    bench = gmm.build_benchmark(cfg.setting)
    ds = cfg.diagnose
    out = cfg.out_dir / "diagnostics"
    rng = np.random.default_rng(stream(cfg.seed, "diagnose"))
    summary: dict = {}

    comp, exact = _slice_joint(bench, rng)
    x_a = comp.means[0, list(bench.split.x_dims)]
    x_b = x_a + 0.5
    cond_a, cond_b = exact.conditional(x_a), exact.conditional(x_b)
    spec = LossSpec("mmd_u", KernelSpec("multi_rbf", 1.0))
    bw = gmm.multi_rbf_bandwidths(1.0)
    pop = gmm.population_mmd2(cond_a, cond_b, bw)
    conc = diag.concentration_experiment(lambda n, r: gmm.sample(cond_a, n, r), lambda n, r: gmm.sample(cond_b, n, r),
                                         pop, ds.concentration_n, ds.concentration_repeats, rng, spec)
    write_csv(out / "concentration.csv", ["n", "rms_error", "mean_estimate"],
              [[r["n"], _fmt(r["rms_error"]), _fmt(r["mean_estimate"])] for r in conc.rows()])
    summary["concentration_slope"] = conc.slope

    uspec = LossSpec("mmd_u", KernelSpec("multi_rbf", 1.0))
    ref = diag.population_gradient(exact.conditional, cond_b, x_a, bw)
    gs = diag.gradient_bias_variance(exact, x_a, cond_b, ref, ds.gradient_n, ds.gradient_repeats, rng, uspec)
    write_csv(out / "gradient.csv", ["n", "bias", "std_err", "variance"],
              [[n, _fmt(float(np.max(np.abs(np.asarray(m) - ref)))), _fmt(float(np.max(se))), _fmt(v)]
               for n, m, se, v in zip(gs.n_grid, gs.mean_grad, gs.std_err, gs.variance)])
    summary["gradient_variance_slope"] = gs.var_slope
    summary["gradient_max_z"] = float(np.max(np.abs(gs.z_scores())))

    groups = {}
    for eps in ds.counterexample_eps:
        student, teacher = diag.counterexample_pair(eps)
        xs = rng.uniform(-2, 2, size=(ds.fidelity_inputs, 1))
        groups[f"counterexample_eps={eps:g}"] = diag.measure_eps(student, teacher, xs, None, ds.fidelity_directions,
                                                                 rng, ds.bootstrap)

    have_models = cfg.checkpoint("cond").exists() and cfg.checkpoint("cm").exists()
    if have_models:
        teacher_m = _load_model(cfg.checkpoint("cond"), "ddpm")
        cm = _load_model(cfg.checkpoint("cm"), "ict")
        levels = [max(cm.cfg.sampling_levels)]
        xs = gmm.sample(bench.prior, ds.fidelity_inputs, rng)
        noise = rng.standard_normal((ds.fidelity_inputs, bench.y_dim))
        # one shared noise row per input; the student uses it as its start noise
        f_s = lambda x, z: cmod.cm_sample(x, cm, z, levels)
        f_t = lambda x, z: teacher_sample(x, cfg.teacher_steps, teacher_m, z)
        groups["trained_cm_vs_teacher"] = diag.measure_eps(f_s, f_t, xs, noise, ds.fidelity_directions, rng,
                                                           ds.bootstrap)

        n_cond = ds.memory_n_cond
        x0 = bench.x_star
        mem = diag.memory_ratio_experiment(
            ds.memory_K, n_cond, lambda K: (lambda x, z: teacher_sample(x, K, teacher_m, z)),
            lambda x, z: cmod.cm_sample(x, cm, z, levels), x0,
            lambda n: rng.standard_normal((n, bench.y_dim)))
        write_csv(out / "memory.csv", ["sampler", "steps", "n_cond", "nodes", "depth", "activations"],
                  [[r.sampler, r.steps, r.n_cond, r.nodes, r.depth, r.activations] for r in mem["rows"]])
        summary["memory_node_ratio"] = mem["node_ratio"]
        summary["memory_activation_ratio"] = mem["activation_ratio"]
        summary["memory_fit_r2"] = mem["fit"]["r2"]
    (out / "fidelity.csv").parent.mkdir(parents=True, exist_ok=True)
    (out / "fidelity.csv").write_text(diag.fidelity_csv(groups))
    summary["fidelity_ratio"] = {k: v.ratio for k, v in groups.items()}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True, default=float))
    return summary
