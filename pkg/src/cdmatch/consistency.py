"""Conditional consistency model trained with improved consistency training (iCT).

The model works in standardized y-coordinates, so noise levels are in units of
the data std. ``sampling_levels`` are relative: level l maps to
sigma = l / max(levels) * sigma_max.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .diffusion import Normalizer
from .nets import AdamW, DivergenceGuard, EmaWeights, MlpConfig, MlpNet

log = logging.getLogger(__name__)

DEFAULT_LEVELS = (150.0, 50.0, 20.0, 10.0, 5.0, 1.0)


@dataclass
class IctConfig:
    s0: int = 10
    s1: int = 1280
    curriculum_period: int | None = None  # K'; None -> total / (log2(s1/s0) + 1)
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    p_mean: float = -1.1
    p_std: float = 2.0
    sampling_levels: tuple[float, ...] = DEFAULT_LEVELS
    epochs: int = 1000
    batch_size: int = 1024
    lr: float = 1e-4
    weight_decay: float = 1e-4
    huber_c: float | None = None  # None -> 0.00054 * sqrt(dim)
    ema_decay: float = 0.999
    log_every: int = 100

    def __post_init__(self):
        self.sampling_levels = tuple(float(v) for v in self.sampling_levels)
        if not self.s0 < self.s1:
            raise ValueError("s0 must be < s1")
        lv = self.sampling_levels
        if not lv or any(b >= a for a, b in zip(lv, lv[1:])):
            raise ValueError("sampling_levels must be non-empty and strictly decreasing")
        if self.level_sigmas(lv)[-1] < self.sigma_min:
            raise ValueError("sampling levels must map to noise >= sigma_min")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("training hyperparameters must be positive")

    @property
    def period(self) -> int:
        if self.curriculum_period:
            return int(self.curriculum_period)
        return max(1, self.epochs // int(math.log2(self.s1 / self.s0) + 1))

    def level_sigmas(self, levels=None) -> np.ndarray:
        lv = np.asarray(levels if levels is not None else self.sampling_levels, dtype=np.float64)
        return lv / max(self.sampling_levels) * self.sigma_max


def curriculum(k: int, s0: int, s1: int, period: int) -> int:
    """Number of discretization boundaries N(k) = min(s0 * 2^floor(k/K'), s1) + 1."""
    return int(min(s0 * 2 ** (k // period), s1)) + 1


def karras_boundaries(n: int, sigma_min: float, sigma_max: float, rho: float = 7.0) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
    return (lo + i / (n - 1) * (hi - lo)) ** rho


def pair_probabilities(sigmas: np.ndarray, p_mean: float, p_std: float) -> np.ndarray:
    """Probability of each lower index n of an adjacent pair (sigma_n, sigma_{n+1}).

    Log-normal mass is assigned to the nearest boundary in log-space, then the
    top boundary (which has no upper neighbour) is dropped and the rest renormalized.
    """
    logs = np.log(sigmas)
    edges = np.concatenate([[-np.inf], 0.5 * (logs[1:] + logs[:-1]), [np.inf]])
    cdf = 0.5 * (1 + erf((edges - p_mean) / (math.sqrt(2) * p_std)))
    mass = np.diff(cdf)[:-1]
    total = mass.sum()
    if total <= 0:
        return np.full(len(sigmas) - 1, 1.0 / (len(sigmas) - 1))
    return mass / total


def pseudo_huber(a, b, c: float) -> Tensor:
    """Row-wise sqrt(||a - b||^2 + c^2) - c."""
    if c <= 0:
        raise ValueError("c must be > 0")
    d = ad.as_tensor(a) - b
    sq = ad.square(d).sum(axis=-1) if d.ndim > 1 else ad.square(d)
    return ad.sqrt(sq + c * c) - c


class ConsistencyModel:
    """f(y, sigma | x) = c_skip(sigma) y + c_out(sigma) F(c_in(sigma) y, sigma, x)."""

    def __init__(self, net: MlpNet, cfg: IctConfig, data_norm: Normalizer, cond_norm: Normalizer,
                 sigma_data: float = 1.0, meta: dict | None = None):
        self.net = net
        self.cfg = cfg
        self.data_norm = data_norm
        self.cond_norm = cond_norm
        self.sigma_data = float(sigma_data)
        self.meta = meta or {}

    @classmethod
    def create(cls, data_dim: int, cfg: IctConfig, data_norm: Normalizer, cond_norm: Normalizer,
               blocks: int = 3, units: int = 128, time_embed_dim: int = 32,
               rng: np.random.Generator | None = None, sigma_data: float = 1.0) -> "ConsistencyModel":
        mc = MlpConfig(data_dim, data_dim, len(cond_norm.mean), blocks, units, time_embed_dim)
        return cls(MlpNet(mc, rng), cfg, data_norm, cond_norm, sigma_data)

    @property
    def data_dim(self) -> int:
        return self.net.cfg.in_dim

    def scalings(self, sigma):
        sd, eps = self.sigma_data, self.cfg.sigma_min
        sigma = np.asarray(sigma, dtype=np.float64)
        c_skip = sd ** 2 / ((sigma - eps) ** 2 + sd ** 2)
        c_out = sd * (sigma - eps) / np.sqrt(sd ** 2 + sigma ** 2)
        c_in = 1.0 / np.sqrt(sigma ** 2 + sd ** 2)
        return c_skip, c_out, c_in

    def apply(self, y, sigma, cond_n, weights=None) -> Tensor:
        """Consistency map in standardized coordinates; ``sigma`` scalar or (n,)."""
        c_skip, c_out, c_in = self.scalings(sigma)
        col = (lambda v: v.reshape(-1, 1)) if np.ndim(sigma) else (lambda v: float(v))
        y = ad.as_tensor(y)
        noise_feat = 250.0 * np.log(np.asarray(sigma, dtype=np.float64))
        F = self.net(y * col(c_in), noise_feat, cond_n, weights=weights)
        return y * col(c_skip) + F * col(c_out)

    def to_dict(self) -> dict:
        cfg = asdict(self.cfg)
        cfg["sampling_levels"] = list(cfg["sampling_levels"])
        return {"kind": "ict", "net": self.net.to_dict(), "ict": cfg,
                "data_norm": self.data_norm.to_dict(), "cond_norm": self.cond_norm.to_dict(),
                "sigma_data": self.sigma_data, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "ConsistencyModel":
        return cls(MlpNet.from_dict(d["net"]), IctConfig(**d["ict"]), Normalizer.from_dict(d["data_norm"]),
                   Normalizer.from_dict(d["cond_norm"]), d["sigma_data"], d.get("meta", {}))


def ict_train(sampler: Callable[[int, np.random.Generator], tuple], model: ConsistencyModel,
              rng: np.random.Generator, progress: Callable | None = None) -> list[float]:
    """iCT with curriculum, log-normal pair proposal, pseudo-Huber and 1/(t_{n+1}-t_n) weights.

    ``sampler(n, rng)`` returns (cond, data) in raw units.
    """
    cfg = model.cfg
    c = cfg.huber_c if cfg.huber_c is not None else 0.00054 * math.sqrt(model.data_dim)
    opt = AdamW(model.net.params, cfg.lr, cfg.weight_decay, total_steps=cfg.epochs)
    guard = DivergenceGuard()
    ema = EmaWeights(model.net.params, cfg.ema_decay)
    curve = []
    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for step in range(cfg.epochs):
        N = curriculum(step, cfg.s0, cfg.s1, cfg.period)
        if N not in cache:
            sig = karras_boundaries(N, cfg.sigma_min, cfg.sigma_max, cfg.rho)
            cache[N] = (sig, pair_probabilities(sig, cfg.p_mean, cfg.p_std))
        sig, probs = cache[N]
        cond, data = sampler(cfg.batch_size, rng)
        cond_n = Tensor(model.cond_norm.forward(cond))
        y0 = model.data_norm.forward(data)
        idx = rng.choice(len(probs), size=cfg.batch_size, p=probs)
        s_lo, s_hi = sig[idx], sig[idx + 1]
        z = rng.standard_normal(y0.shape)
        target = model.apply(y0 + s_lo[:, None] * z, s_lo, cond_n).data
        lam = 1.0 / (s_hi - s_lo)
        w = model.net.leaves()
        with Tape() as tape:
            pred = model.apply(Tensor(y0 + s_hi[:, None] * z), s_hi, cond_n, weights=w)
            loss = (pseudo_huber(pred, target, c) * lam).mean()
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
    model.meta["training"].update({"final_loss": float(np.mean(curve[-50:]))})
    return curve


def cm_noise(model: ConsistencyModel, n: int, n_levels: int, rng: np.random.Generator) -> np.ndarray:
    """Standard-normal noise of shape (n_levels, n, dy) for :func:`cm_sample`."""
    return rng.standard_normal((n_levels, n, model.data_dim))


def cm_sample(x, model: ConsistencyModel, noise: np.ndarray, levels=None) -> Tensor:
    """Multistep consistency sampling, differentiable in the raw conditioning ``x``.

    ``noise[0]`` seeds y ~ N(0, sigma_0^2 I); later slices re-noise to each level.
    ``levels=[max]`` is the single-step sampler.
    """
    sigmas = model.cfg.level_sigmas(levels)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim == 2:
        noise = noise[None]
    if noise.shape[0] < len(sigmas):
        raise ValueError(f"need {len(sigmas)} noise slices, got {noise.shape[0]}")
    n = noise.shape[1]
    x = ad.as_tensor(x)
    if x.ndim == 1:
        x = ad.broadcast_to(ad.reshape(x, (1, -1)), (n, x.shape[0]))
    cond_n = model.cond_norm.forward(x)
    eps = model.cfg.sigma_min
    # noise slices are gradient-tracked leaves, as in teacher_sample
    z = [Tensor(v, requires_grad=True) for v in noise[:len(sigmas)]]
    y = model.apply(z[0] * float(sigmas[0]), float(sigmas[0]), cond_n)
    for i, s in enumerate(sigmas[1:], start=1):
        y = model.apply(y + z[i] * math.sqrt(max(s * s - eps * eps, 0.0)), float(s), cond_n)
    return model.data_norm.inverse(y)
