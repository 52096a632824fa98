"""DDPM score networks over P(X) and P(Y|X), DDIM sampling and Tweedie estimates.

Networks predict the injected noise. The diffusion state lives in standardized
coordinates; :class:`Normalizer` maps to and from data units and is
differentiable, so gradients with respect to raw conditioning values flow
through it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .nets import AdamW, DivergenceGuard, EmaWeights, MlpConfig, MlpNet

log = logging.getLogger(__name__)

# x0-clipping only acts where 1/sqrt(ab_t) would amplify noise-prediction error > ~30x
CLIP_BELOW_AB = 1e-3
# below this the state holds no usable signal; dividing by sqrt(ab_t) would only amplify eps error
TERMINAL_AB = 1e-6


@dataclass
class NoiseSchedule:
    kind: Literal["cosine", "linear"] = "cosine"
    T: int = 100
    s: float = 0.008
    beta_start: float = 1e-4
    beta_end: float = 0.02
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.kind == "cosine":
            f = lambda t: np.cos((t / self.T + self.s) / (1 + self.s) * math.pi / 2) ** 2
            raw = f(np.arange(0, self.T + 1, dtype=np.float64))
            ratios = np.clip(raw[1:] / raw[:-1], 1e-3, 1.0)
            self.alpha_bar = np.cumprod(ratios)
        elif self.kind == "linear":
            betas = np.linspace(self.beta_start, self.beta_end, self.T)
            self.alpha_bar = np.cumprod(1.0 - betas)
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def ab(self, t) -> np.ndarray | float:
        """alpha_bar at integer time t (t = 0 gives 1)."""
        t = np.asarray(t)
        full = np.concatenate([[1.0], self.alpha_bar])
        out = full[t]
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "s": self.s,
                "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(**d)


def timesteps(T: int, n_steps: int) -> list[tuple[int, int]]:
    """Descending (t, t_prev) pairs covering T -> 0 in ``n_steps`` near-even strides."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in [1, {T}]")
    grid = np.unique(np.round(np.linspace(0, T, n_steps + 1)).astype(int))[::-1]
    return [(int(a), int(b)) for a, b in zip(grid[:-1], grid[1:])]


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.std = np.atleast_1d(np.asarray(self.std, dtype=np.float64))

    @classmethod
    def fit(cls, data: np.ndarray) -> "Normalizer":
        data = np.asarray(data, dtype=np.float64)
        return cls(data.mean(axis=0), data.std(axis=0))

    def forward(self, x):
        if isinstance(x, Tensor):
            return (x - self.mean) * (1.0 / self.std)
        return (np.asarray(x) - self.mean) / self.std

    def inverse(self, z):
        if isinstance(z, Tensor):
            return z * self.std + self.mean
        return np.asarray(z) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(d["mean"], d["std"])


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 1024
    lr: float = 1e-4
    weight_decay: float = 1e-4
    cfg_dropout: float = 0.2
    ema_decay: float = 0.999
    log_every: int = 100

    def __post_init__(self):
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("training hyperparameters must be positive")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ValueError("cfg_dropout must lie in [0, 1]")


class DiffusionModel:
    """Noise-prediction network + schedule + normalizers (conditional if ``cond_norm`` set)."""

    def __init__(self, net: MlpNet, schedule: NoiseSchedule, data_norm: Normalizer,
                 cond_norm: Normalizer | None = None, meta: dict | None = None,
                 x0_clip: float | None = None):
        self.x0_clip = x0_clip
        self.net = net
        self.schedule = schedule
        self.data_norm = data_norm
        self.cond_norm = cond_norm
        self.meta = meta or {}

    @classmethod
    def create(cls, data_dim: int, schedule: NoiseSchedule, data_norm: Normalizer,
               cond_norm: Normalizer | None = None, blocks: int = 3, units: int = 128,
               time_embed_dim: int = 32, rng: np.random.Generator | None = None,
               x0_clip: float | None = None) -> "DiffusionModel":
        cond_dim = len(cond_norm.mean) if cond_norm is not None else 0
        cfg = MlpConfig(data_dim, data_dim, cond_dim, blocks, units, time_embed_dim)
        return cls(MlpNet(cfg, rng), schedule, data_norm, cond_norm, x0_clip=x0_clip)

    @property
    def conditional(self) -> bool:
        return self.cond_norm is not None

    @property
    def data_dim(self) -> int:
        return self.net.cfg.in_dim

    def eps(self, x_t, t, cond_n=None, weights=None, cond_mask=None) -> Tensor:
        return self.net(x_t, t, cond_n, cond_mask=cond_mask, weights=weights)

    def to_dict(self) -> dict:
        return {"kind": "ddpm", "net": self.net.to_dict(), "schedule": self.schedule.to_dict(),
                "data_norm": self.data_norm.to_dict(),
                "cond_norm": self.cond_norm.to_dict() if self.cond_norm else None,
                "x0_clip": self.x0_clip, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionModel":
        return cls(MlpNet.from_dict(d["net"]), NoiseSchedule.from_dict(d["schedule"]),
                   Normalizer.from_dict(d["data_norm"]),
                   Normalizer.from_dict(d["cond_norm"]) if d.get("cond_norm") else None,
                   d.get("meta", {}), d.get("x0_clip"))


def forward_noise(x0, t, schedule: NoiseSchedule, rng: np.random.Generator,
                  eps: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; returns (x_t, eps)."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"t must lie in [1, {schedule.T}]")
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    ab = np.asarray(schedule.ab(t), dtype=np.float64)
    if ab.ndim == 1 and x0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


def train_ddpm(sampler: Callable[[int, np.random.Generator], tuple], model: DiffusionModel,
               cfg: TrainConfig, rng: np.random.Generator, progress: Callable | None = None) -> list[float]:
    """Epsilon-prediction MSE training with cosine-annealed AdamW.

    ``sampler(n, rng)`` returns ``(data,)`` for the unconditional model or
    ``(cond, data)`` for the conditional one (raw units). Returns the per-step loss.
    """
    opt = AdamW(model.net.params, cfg.lr, cfg.weight_decay, total_steps=cfg.epochs)
    guard = DivergenceGuard()
    ema = EmaWeights(model.net.params, cfg.ema_decay)
    curve = []
    T = model.schedule.T
    for step in range(cfg.epochs):
        batch = sampler(cfg.batch_size, rng)
        if model.conditional:
            cond, data = batch
            cond_n = model.cond_norm.forward(cond)
            mask = (rng.random(cfg.batch_size) >= cfg.cfg_dropout).astype(np.float64)
        else:
            data = batch[0] if isinstance(batch, tuple) else batch
            cond_n, mask = None, None
        x0 = model.data_norm.forward(data)
        t = rng.integers(1, T + 1, size=cfg.batch_size)
        x_t, eps = forward_noise(x0, t, model.schedule, rng)
        w = model.net.leaves()
        with Tape() as tape:
            pred = model.eps(Tensor(x_t), t, None if cond_n is None else Tensor(cond_n), w, mask)
            loss = ad.square(pred - eps).mean()
        grads = tape.backward(loss)
        opt.step({k: grads[v] for k, v in w.items()})
        ema.update(model.net.params)
        value = loss.item()
        guard.update(value, step)
        curve.append(value)
        if progress is not None and (step % cfg.log_every == 0 or step == cfg.epochs - 1):
            progress(step, value)
    ema.copy_to(model.net.params)
    model.meta.setdefault("training", {})
    model.meta["training"].update({"config": asdict(cfg), "final_loss": float(np.mean(curve[-50:]))})
    return curve


def ddim_coefficients(t: int, t_prev: int, schedule: NoiseSchedule) -> tuple[float, float]:
    """x_prev = a x_t + b eps_hat for the eta = 0 DDIM update.

    From a terminal state (ab_t < TERMINAL_AB) the denoised estimate is the data
    mean, zero in standardized units, so b = 0 whatever the network predicts.
    """
    ab_t, ab_p = schedule.ab(t), schedule.ab(t_prev)
    if 0.0 < ab_t < TERMINAL_AB:
        return math.sqrt((1.0 - ab_p) / (1.0 - ab_t)), 0.0
    a = math.sqrt(ab_p / ab_t)
    b = math.sqrt(1.0 - ab_p) - a * math.sqrt(1.0 - ab_t)
    return a, b


def _clip(v, c: float):
    if isinstance(v, Tensor):
        return ad.clamp_min(-ad.clamp_min(-v, -c), -c)
    return np.clip(v, -c, c)


def ddim_update(x_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule, x0_clip: float | None = None):
    """eta = 0 DDIM update; with ``x0_clip`` the denoised estimate is clipped to
    [-c, c] (standardized units) on near-pure-noise steps and the noise re-derived."""
    if t_prev > t:
        raise ValueError("t_prev must not exceed t")
    ab = schedule.ab(t)
    if x0_clip is not None and TERMINAL_AB <= ab < CLIP_BELOW_AB:
        ab_p = schedule.ab(t_prev)
        x0 = _clip((x_t - eps_hat * math.sqrt(1.0 - ab)) * (1.0 / math.sqrt(ab)), x0_clip)
        eps_c = (x_t - x0 * math.sqrt(ab)) * (1.0 / math.sqrt(1.0 - ab))
        return x0 * math.sqrt(ab_p) + eps_c * math.sqrt(1.0 - ab_p)
    a, b = ddim_coefficients(t, t_prev, schedule)
    return x_t * a + eps_hat * b


def ddim_step(x_t, net: Callable, t: int, t_prev: int, schedule: NoiseSchedule):
    """One deterministic DDIM step; ``net(x_t, t)`` returns the predicted noise."""
    if t_prev == t:
        return x_t
    return ddim_update(x_t, net(x_t, t), t, t_prev, schedule)


def tweedie(x_t, score_or_eps, t: int, schedule: NoiseSchedule, kind: Literal["eps", "score"] = "eps"):
    """Posterior-mean estimate x0_hat = (x_t + (1 - ab_t) s) / sqrt(ab_t)."""
    ab = schedule.ab(t)
    if ab <= 0:
        raise ValueError("alpha_bar_t = 0: Tweedie estimate undefined")
    if kind == "eps":
        if ab >= 1.0:
            return x_t * 1.0
        score = score_or_eps * (-1.0 / math.sqrt(1.0 - ab))
    else:
        score = score_or_eps
    return (x_t + score * (1.0 - ab)) * (1.0 / math.sqrt(ab))


def ddim_sample(model: DiffusionModel, n: int, n_steps: int, rng: np.random.Generator,
                cond: np.ndarray | None = None) -> np.ndarray:
    """Unconditional (or conditional, guidance weight 1) DDIM chain; raw-unit output."""
    x = rng.standard_normal((n, model.data_dim))
    cond_n = None
    if cond is not None:
        cond = np.asarray(cond, dtype=np.float64)
        cond_n = model.cond_norm.forward(np.broadcast_to(cond, (n, cond.shape[-1])))
    for t, tp in timesteps(model.schedule.T, n_steps):
        eps = model.eps(Tensor(x), t, None if cond_n is None else Tensor(cond_n)).data
        x = ddim_update(x, eps, t, tp, model.schedule, model.x0_clip)
    return model.data_norm.inverse(x)


def teacher_sample(x, K: int, model: DiffusionModel, noise: np.ndarray) -> Tensor:
    """K-step conditional DDIM chain from fixed start noise, differentiable in ``x``.

    ``x`` is (n, dx) or (dx,) in raw units; ``noise`` is the (n, dy) start state.
    The noise enters as a gradient-tracked leaf, so every step of the chain is
    recorded uniformly. ``K = 0`` leaves only the fixed normalization overhead.
    """
    if not model.conditional:
        raise ValueError("teacher_sample needs a conditional model")
    if K < 0:
        raise ValueError("K must be >= 0")
    x = ad.as_tensor(x)
    n = noise.shape[0]
    if x.ndim == 1:
        x = ad.broadcast_to(ad.reshape(x, (1, -1)), (n, x.shape[0]))
    cond_n = model.cond_norm.forward(x)
    y = Tensor(noise, requires_grad=True)
    for t, tp in (timesteps(model.schedule.T, K) if K else []):
        y = ddim_update(y, model.eps(y, t, cond_n), t, tp, model.schedule, model.x0_clip)
    return model.data_norm.inverse(y)
