"""Loss-guided reverse diffusion over X with a distributional loss on P(Y|X).

The outer loop runs the unconditional prior in its standardized coordinates,
forms the Tweedie estimate, perturbs it, maps it to raw units and asks a guide
for a loss. The guide is either sample based (a differentiable conditional
sampler plus a plug-in distance to a fixed target sample) or analytic.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from . import gmm
from .autodiff import Tape, Tensor
from .consistency import DEFAULT_LEVELS, ConsistencyModel, cm_noise, cm_sample
from .diffusion import DiffusionModel, ddim_coefficients, teacher_sample, timesteps, tweedie
from .losses import KernelSpec, LossError, LossSpec, loss_eval

log = logging.getLogger(__name__)

LossFn = Callable[[Tensor, np.random.Generator], Tensor]


@dataclass
class GuidanceConfig:
    T_outer: int = 50
    n_mc: int = 3
    n_cond: int = 250
    n_target: int = 250
    loss: LossSpec = field(default_factory=LossSpec)
    step_rule: Literal["dps_normalized", "fixed_schedule"] = "dps_normalized"
    zeta: float = 0.05  # zeta' of the DPS rule
    beta: float = 1.0
    inner: Literal["cm_single", "cm_multi", "teacher"] = "cm_single"
    levels: tuple[float, ...] = DEFAULT_LEVELS
    teacher_steps: int = 10
    mode: Literal["sde", "ddim"] = "sde"
    clip: float | None = None  # kappa: |zeta_t grad| <= kappa sqrt(1 - ab_t), per coordinate
    restarts: int = 25
    reeval_n: int = 2000

    def __post_init__(self):
        if isinstance(self.loss, dict):
            lk = dict(self.loss)
            if isinstance(lk.get("kernel"), dict):
                lk["kernel"] = KernelSpec(**lk["kernel"])
            self.loss = LossSpec(**lk)
        self.levels = tuple(float(v) for v in self.levels)
        if self.T_outer < 1:
            raise ValueError("T_outer must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.n_mc < 0 or self.n_cond < 1 or self.n_target < 1:
            raise ValueError("sample counts must be positive")
        if self.loss.kind in ("mmd_u", "mmd_u_sqrt") and self.n_cond < 2:
            raise LossError("n_cond must be >= 2 for the U-statistic")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.step_rule not in ("dps_normalized", "fixed_schedule"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if self.mode not in ("sde", "ddim"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class GuidanceRun:
    seed: list[int]
    x0_final: list[float] | None
    trace: list[float | None]
    wall_time: float
    tape_max_depth: int = 0
    tape_max_nodes: int = 0
    tape_max_activations: int = 0
    config_hash: str = ""
    method: str = ""
    failed: bool = False
    fail_step: int | None = None
    fail_reason: str | None = None
    final_loss: float | None = None  # re-evaluated with a fresh large sample

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceRun":
        return cls(**d)


# ---- inner samplers: x (raw, (dx,)) -> (n, dy) samples, differentiable in x

class CmSampler:
    def __init__(self, model: ConsistencyModel, levels: Sequence[float] | None = None):
        self.model = model
        self.levels = None if levels is None else [float(v) for v in levels]

    @property
    def n_levels(self) -> int:
        return len(self.levels) if self.levels is not None else len(self.model.cfg.sampling_levels)

    def noise(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return cm_noise(self.model, n, self.n_levels, rng)

    def from_noise(self, x, noise: np.ndarray) -> Tensor:
        return cm_sample(x, self.model, noise, self.levels)

    def __call__(self, x, n: int, rng: np.random.Generator) -> Tensor:
        return self.from_noise(x, self.noise(n, rng))


class TeacherSampler:
    def __init__(self, model: DiffusionModel, steps: int = 10):
        self.model = model
        self.steps = steps

    def noise(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.model.data_dim))

    def from_noise(self, x, noise: np.ndarray) -> Tensor:
        noise = noise[0] if noise.ndim == 3 else noise
        return teacher_sample(x, self.steps, self.model, noise)

    def __call__(self, x, n: int, rng: np.random.Generator) -> Tensor:
        return self.from_noise(x, self.noise(n, rng))


def single_step_levels() -> list[float]:
    return [max(DEFAULT_LEVELS)]


def make_sampler(cfg: GuidanceConfig, cm: ConsistencyModel | None = None,
                 teacher: DiffusionModel | None = None):
    if cfg.inner == "teacher":
        if teacher is None:
            raise ValueError("inner='teacher' needs a conditional diffusion model")
        return TeacherSampler(teacher, cfg.teacher_steps)
    if cm is None:
        raise ValueError(f"inner={cfg.inner!r} needs a consistency model")
    if cfg.inner == "cm_single":
        return CmSampler(cm, [max(cm.cfg.sampling_levels)])
    return CmSampler(cm, cfg.levels)


def inner_loss(x, sampler, target: np.ndarray, spec: LossSpec, n_cond: int,
               rng: np.random.Generator) -> Tensor:
    """Plug-in loss L(S_cond(x), S_G) with S_cond = {f(x, eta_i)}; no tape management."""
    return loss_eval(spec, sampler(x, n_cond, rng), target, rng)


def inner_estimate(x, sampler, target: np.ndarray, spec: LossSpec, n_cond: int,
                   rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """(L_hat(x), grad_x L_hat) by one backward pass; non-finite gradients raise FloatingPointError."""
    if spec.kind in ("mmd_u", "mmd_u_sqrt") and n_cond < 2:
        raise LossError("U-statistic needs n_cond >= 2")
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        val = inner_loss(xt, sampler, target, spec, n_cond, rng)
    grad = tape.backward(val)[xt]
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite inner gradient")
    return val.item(), grad


# ---- guides: produce per-run loss functions over raw x of shape (B, dx)

class Guide(Protocol):
    def prepare(self, rng: np.random.Generator) -> LossFn: ...


class SampleGuide:
    """Learned conditional sampler + plug-in distance to a target sample drawn once per run."""

    def __init__(self, sampler, target: gmm.GaussianMixture, spec: LossSpec, n_cond: int, n_target: int):
        self.sampler = sampler
        self.target = target
        self.spec = spec
        self.n_cond = n_cond
        self.n_target = n_target

    def prepare(self, rng: np.random.Generator) -> LossFn:
        s_g = gmm.sample(self.target, self.n_target, rng)

        def fn(x: Tensor, r: np.random.Generator) -> Tensor:
            if x.shape[0] != 1:
                raise ValueError("sample-based guidance runs one chain at a time")
            v = inner_loss(x[0], self.sampler, s_g, self.spec, self.n_cond, r)
            return ad.reshape(v, (1,))

        return fn

    def reevaluate(self, x: np.ndarray, rng: np.random.Generator, n: int = 2000) -> float:
        """Fresh large-sample loss at x (no gradient) for ranking restarts."""
        s_g = gmm.sample(self.target, n, rng)
        cond = self.sampler(np.asarray(x, dtype=np.float64), n, rng)
        return float(loss_eval(self.spec, cond, s_g, rng).item())


class AnalyticGuide:
    """Closed-form L2-GMM loss; used for the beta sweep where no learned conditional is involved."""

    def __init__(self, loss: gmm.AnalyticL2Loss):
        self.loss = loss

    def prepare(self, rng: np.random.Generator) -> LossFn:
        return lambda x, r: self.loss(x)

    def reevaluate(self, x: np.ndarray, rng: np.random.Generator, n: int = 2000) -> float:
        return float(self.loss(np.atleast_2d(x)).data[0])


# ---- outer loop

def vp_increments(ab: Callable[[int], float], steps: list[tuple[int, int]]) -> np.ndarray:
    """b_t = 1 - ab_t / ab_{t_prev} = g(t)^2 dt on the outer grid (VP form)."""
    return np.array([1.0 - ab(t) / ab(tp) for t, tp in steps])


def perturbation_variance(g2: float) -> float:
    g = math.sqrt(g2)
    return g / math.sqrt(1.0 + g * g)


def _spawn(seed) -> list[np.random.Generator]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def mlgd_outer(prior: DiffusionModel, guide: Guide | None, cfg: GuidanceConfig, seed,
               n_chains: int = 1, method: str = "") -> GuidanceRun:
    """One guided reverse trajectory (or ``n_chains`` independent ones sharing a tape).

    Guidance is skipped entirely when ``beta == 0`` or no guide is given; the
    denoising noise comes from its own stream, so such runs are bit-identical
    to :func:`sample_prior`.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seed_repr = [int(v) for v in np.atleast_1d(ss.entropy)] + [int(v) for v in ss.spawn_key]
    r_denoise, r_target, r_perturb, r_inner = _spawn(ss)
    sch = prior.schedule
    steps = timesteps(sch.T, cfg.T_outer)
    g2 = vp_increments(sch.ab, steps)
    guided = guide is not None and cfg.beta > 0
    loss_fn = guide.prepare(r_target) if guided else None
    dx = prior.data_dim
    x = r_denoise.standard_normal((n_chains, dx))
    trace: list[float | None] = []
    stats = {"depth": 0, "nodes": 0, "act": 0}
    t0 = time.perf_counter()

    def fail(i: int, why: str) -> GuidanceRun:
        log.warning("run %s failed at step %d: %s", seed_repr, i, why)
        return GuidanceRun(seed_repr, None, trace + [None] * (len(steps) - len(trace)),
                           time.perf_counter() - t0, stats["depth"], stats["nodes"], stats["act"],
                           cfg.hash(), method, True, i, why)

    for i, (t, tp) in enumerate(steps):
        ab_t = sch.ab(t)
        try:
            if guided:
                xt = Tensor(x, requires_grad=True)
                with Tape() as tape:
                    eps_t = prior.eps(xt, t)
                    x0n = tweedie(xt, eps_t, t, sch)
                    if cfg.n_mc == 0:
                        agg = loss_fn(prior.data_norm.inverse(x0n), r_inner)
                    else:
                        sd = math.sqrt(perturbation_variance(g2[i]))
                        cols = []
                        for _ in range(cfg.n_mc):
                            xi = x0n + sd * r_perturb.standard_normal(x0n.shape)
                            cols.append(ad.reshape(loss_fn(prior.data_norm.inverse(xi), r_inner), (-1, 1)))
                        neg = -ad.concat(cols, axis=1)
                        agg = -(ad.logsumexp(neg, axis=1) - math.log(cfg.n_mc))
                    root = agg.sum()
                stats["depth"] = max(stats["depth"], tape.depth)
                stats["nodes"] = max(stats["nodes"], tape.n_nodes)
                stats["act"] = max(stats["act"], tape.activations)
                grad = tape.backward(root)[xt]
                eps = eps_t.data
                trace.append(float(root.item()) / n_chains)
                if not np.all(np.isfinite(grad)):
                    return fail(i, "non-finite guidance gradient")
            else:
                eps = prior.eps(Tensor(x), t).data
                trace.append(None)
        except FloatingPointError as e:
            return fail(i, str(e))

        if cfg.mode == "ddim":
            a, b = ddim_coefficients(t, tp, sch)
            x_new = a * x + b * eps
            h_fixed = abs(b) * math.sqrt(1.0 - ab_t)
        else:
            b = g2[i]
            score = -eps / math.sqrt(1.0 - ab_t)
            # drift f = -b x / 2 and g^2 dt = b for the VP form
            x_new = x + 0.5 * b * x + b * score
            if tp > 0:
                x_new = x_new + math.sqrt(b) * r_denoise.standard_normal(x.shape)
            h_fixed = b
        if guided:
            if cfg.step_rule == "dps_normalized":
                norm = np.linalg.norm(grad, axis=1, keepdims=True)
                step = np.where(norm > 0, cfg.beta * cfg.zeta * grad / np.where(norm > 0, norm, 1.0), 0.0)
            else:
                step = cfg.beta * h_fixed * grad
            if cfg.clip is not None:
                cap = cfg.clip * math.sqrt(1.0 - ab_t)
                step = np.clip(step, -cap, cap)
            x_new = x_new - step
        if not np.all(np.isfinite(x_new)):
            return fail(i, "non-finite state")
        x = x_new

    x0 = prior.data_norm.inverse(x)
    run = GuidanceRun(seed_repr, x0.reshape(-1).tolist() if n_chains == 1 else x0.tolist(), trace,
                      time.perf_counter() - t0, stats["depth"], stats["nodes"], stats["act"],
                      cfg.hash(), method)
    return run


def sample_prior(prior: DiffusionModel, cfg: GuidanceConfig, seed, n_chains: int = 1) -> np.ndarray:
    """Plain reverse sampler with the same step form and noise stream as :func:`mlgd_outer`."""
    run = mlgd_outer(prior, None, cfg, seed, n_chains)
    return np.asarray(run.x0_final, dtype=np.float64).reshape(n_chains, -1)


@dataclass
class CdmoResult:
    runs: list[GuidanceRun]  # ranked by re-evaluated loss, failed runs last
    failures: list[int]

    @property
    def best(self) -> GuidanceRun:
        return self.runs[0]

    def top(self, k: int) -> list[GuidanceRun]:
        ok = [r for r in self.runs if not r.failed]
        return ok[:k]


class AllRunsFailed(RuntimeError):
    pass


def _one_run(args):
    prior, guide, cfg, ss, method = args
    run = mlgd_outer(prior, guide, cfg, ss, 1, method)
    if not run.failed:
        rng = np.random.default_rng(ss.spawn(5)[4])
        run.final_loss = guide.reevaluate(np.asarray(run.x0_final), rng, cfg.reeval_n)
    return run


def restart_seeds(master_seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(master_seed).spawn(n)


def cdmo(prior: DiffusionModel, guide, cfg: GuidanceConfig, master_seed: int, method: str = "",
         workers: int = 1) -> CdmoResult:
    """R independent restarts, re-evaluated with a fresh n = ``cfg.reeval_n`` sample and ranked."""
    seeds = restart_seeds(master_seed, cfg.restarts)
    jobs = [(prior, guide, cfg, s, method) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            runs = list(ex.map(_one_run, jobs))
    else:
        runs = [_one_run(j) for j in jobs]
    failures = [i for i, r in enumerate(runs) if r.failed]
    if len(failures) == len(runs):
        steps = ", ".join(f"run {i}: step {r.fail_step}" for i, r in enumerate(runs))
        raise AllRunsFailed(f"all {len(runs)} runs failed ({steps})")
    order = sorted(range(len(runs)), key=lambda i: (runs[i].failed, runs[i].final_loss or 0.0, i))
    return CdmoResult([runs[i] for i in order], failures)


# ---- beta sweep (tempered-posterior sampling with the analytic loss)

@dataclass
class SweepResult:
    betas: list[float]
    samples: dict[float, np.ndarray]
    w1: dict[float, float]
    grid: np.ndarray
    densities: dict[float, np.ndarray]

    def table(self) -> list[dict]:
        rows = []
        for b in self.betas:
            s = self.samples[b]
            rows.append({"beta": b, "w1": self.w1[b], "mean": float(s.mean()), "std": float(s.std()),
                         "n": int(s.size)})
        return rows


def sweep_config(**overrides) -> GuidanceConfig:
    base = dict(T_outer=10, n_mc=0, mode="ddim", step_rule="fixed_schedule", clip=0.5, restarts=1)
    base.update(overrides)
    return GuidanceConfig(**base)


def cdms_sweep(prior: DiffusionModel, bench: gmm.Benchmark, betas: Sequence[float], n_runs: int,
               seed: int, cfg: GuidanceConfig | None = None) -> SweepResult:
    """Per beta, ``n_runs`` guided chains with the analytic loss; W1 to the grid tilted posterior."""
    if bench.x_dim != 1:
        raise ValueError("the beta sweep needs one-dimensional X")
    cfg = cfg or sweep_config()
    loss = gmm.AnalyticL2Loss(bench.joint, bench.split, bench.target)
    guide = AnalyticGuide(loss)
    grid = gmm.default_grid(float(bench.x_star[0]))
    field_fn = lambda z: loss(np.asarray(z, dtype=np.float64).reshape(-1, 1)).data
    samples, w1, dens = {}, {}, {}
    for beta in betas:
        # common random numbers: every beta starts from the same x_T
        c = GuidanceConfig(**{**cfg.to_dict(), "beta": float(beta)})
        run = mlgd_outer(prior, guide, c, np.random.SeedSequence(seed), n_chains=n_runs)
        if run.failed:
            raise FloatingPointError(f"beta={beta}: run failed at step {run.fail_step}")
        xs = np.asarray(run.x0_final, dtype=np.float64).reshape(-1)
        d = gmm.tilted_density(gmm.TiltedPosterior(bench.prior, float(beta), field_fn), grid)
        samples[float(beta)] = xs
        dens[float(beta)] = d
        w1[float(beta)] = gmm.w1_to_grid_density(xs, grid, d)
    return SweepResult([float(b) for b in betas], samples, w1, grid, dens)
