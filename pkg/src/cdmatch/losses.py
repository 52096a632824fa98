"""Differentiable sample-based distances between conditional and target samples.

Gradients flow through the first (``cond``) argument only; the target sample is
always treated as a constant, as are data-dependent kernel bandwidths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Bandwidth = Union[Literal["mean_sq", "median"], float]


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: Literal["multi_rbf", "generalized_rbf"] = "multi_rbf"
    bandwidth: Bandwidth = "mean_sq"
    alpha: float = 1.0
    n_scales: int = 5

    def __post_init__(self):
        if self.kind not in ("multi_rbf", "generalized_rbf"):
            raise LossError(f"unknown kernel kind {self.kind!r}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth not in ("mean_sq", "median"):
                raise LossError(f"unknown bandwidth heuristic {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise LossError("fixed bandwidth must be > 0")
        if not self.alpha > 0:
            raise LossError("alpha must be > 0")


@dataclass(frozen=True)
class LossSpec:
    kind: Literal["mmd_v", "mmd_u", "mmd_u_sqrt", "swd"] = "mmd_v"
    kernel: KernelSpec = field(default_factory=KernelSpec)
    n_projections: int = 50
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("mmd_v", "mmd_u", "mmd_u_sqrt", "swd"):
            raise LossError(f"unknown loss kind {self.kind!r}")
        if self.n_projections < 1:
            raise LossError("n_projections must be >= 1")


def _as2d(x) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim == 1:
        x = ad.reshape(x, (-1, 1))
    return x


def _np_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def sqdist(a: Tensor, b) -> Tensor:
    """Pairwise squared Euclidean distances, (n, d) x (m, d) -> (n, m)."""
    b = ad.as_tensor(b)
    n, d = a.shape
    m = b.shape[0]
    if d == 1:
        diff = ad.reshape(a, (n, 1)) - ad.reshape(b, (1, m))
        return ad.square(diff)
    diff = ad.reshape(a, (n, 1, d)) - ad.reshape(b, (1, m, d))
    return ad.square(diff).sum(axis=2)


def bandwidth(k: KernelSpec, cond: np.ndarray, target: np.ndarray) -> float:
    """Scalar bandwidth from the merged sample; never part of the gradient graph."""
    if not isinstance(k.bandwidth, str):
        return float(k.bandwidth)
    merged = np.concatenate([cond, target], axis=0)
    d2 = _np_sqdist(merged, merged)
    iu = np.triu_indices(len(merged), k=1)
    pair = d2[iu]
    if k.bandwidth == "mean_sq":
        # multi-RBF convention: sigma is the mean pairwise squared distance itself
        val = float(pair.mean()) if pair.size else 1.0
    else:
        val = float(np.sqrt(0.5 * np.median(pair))) if pair.size else 1.0
    return val if val > 0 else 1.0


def kernel_from_sqdist(k: KernelSpec, d2: Tensor, sigma: float) -> Tensor:
    if k.kind == "multi_rbf":
        # bandwidths double with l, so each term is the square of the next wider one
        term = ad.exp(d2 * (-1.0 / (sigma * 2.0 ** (k.n_scales - 3))))
        out = term
        for _ in range(k.n_scales - 1):
            term = ad.square(term)
            out = out + term
        return out
    scaled = d2 * (1.0 / (2.0 * sigma * sigma))
    if k.alpha != 1.0:
        scaled = ad.power(ad.clamp_min(scaled, 0.0) + 1e-30, k.alpha)
    return ad.exp(-scaled)


def _kernel_blocks(cond, target, k: KernelSpec):
    cond = _as2d(cond)
    tgt = np.asarray(ad.as_tensor(target).data, dtype=np.float64)
    if tgt.ndim == 1:
        tgt = tgt[:, None]
    if cond.shape[1] != tgt.shape[1]:
        raise LossError(f"dimension mismatch: cond has d={cond.shape[1]}, target has d={tgt.shape[1]}")
    sigma = bandwidth(k, cond.data, tgt)
    kxx = kernel_from_sqdist(k, sqdist(cond, cond), sigma)
    kxy = kernel_from_sqdist(k, sqdist(cond, tgt), sigma)
    kyy = kernel_from_sqdist(k, Tensor(_np_sqdist(tgt, tgt)), sigma).data
    return kxx, kxy, kyy


def mmd_v(cond, target, k: KernelSpec = KernelSpec()) -> Tensor:
    """Biased V-statistic estimate of squared MMD."""
    kxx, kxy, kyy = _kernel_blocks(cond, target, k)
    return kxx.mean() - 2.0 * kxy.mean() + float(kyy.mean())


def mmd_u(cond, target, k: KernelSpec = KernelSpec()) -> Tensor:
    """Unbiased U-statistic estimate of squared MMD (diagonals excluded)."""
    n = ad.as_tensor(cond).shape[0]
    m = ad.as_tensor(target).shape[0]
    if n < 2 or m < 2:
        raise LossError(f"U-statistic needs n, m >= 2 (got n={n}, m={m})")
    kxx, kxy, kyy = _kernel_blocks(cond, target, k)
    # diagonal of kxx is the constant k(a, a); subtract its value without a gradient path
    xx = (kxx.sum() - float(np.trace(kxx.data))) * (1.0 / (n * (n - 1)))
    yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return xx - 2.0 * kxy.mean() + float(yy)


def mmd_u_sqrt(cond, target, k: KernelSpec = KernelSpec(kind="generalized_rbf", bandwidth="median"),
               eps: float = 1e-8) -> Tensor:
    """sqrt(|U-statistic| + eps)."""
    return ad.sqrt(ad.abs(mmd_u(cond, target, k)) + eps)


def random_directions(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """(d, n) matrix of directions uniform on the unit sphere."""
    v = rng.standard_normal((d, n))
    return v / np.linalg.norm(v, axis=0, keepdims=True)


def wasserstein_1d(a: Tensor, b: np.ndarray) -> Tensor:
    """Sorted-sample W1 for equal-size samples, column-wise for 2-D input; returns per-column mean."""
    sa, _ = ad.sort_with_gradient(a)
    sb = np.sort(b, axis=0, kind="stable")
    return ad.abs(sa - sb).mean(axis=0)


def swd(cond, target, n_projections: int = 50, rng: np.random.Generator | None = None,
        directions: np.ndarray | None = None) -> Tensor:
    """Sliced W1 averaged over random unit directions; 1-D data skips projection."""
    cond = _as2d(cond)
    tgt = np.asarray(ad.as_tensor(target).data, dtype=np.float64)
    if tgt.ndim == 1:
        tgt = tgt[:, None]
    if cond.shape[0] != tgt.shape[0]:
        raise LossError(f"swd needs equal sample sizes, got n={cond.shape[0]} and m={tgt.shape[0]}")
    if cond.shape[1] != tgt.shape[1]:
        raise LossError(f"dimension mismatch: {cond.shape[1]} vs {tgt.shape[1]}")
    d = cond.shape[1]
    if d == 1 and directions is None:
        return wasserstein_1d(cond, tgt).mean()
    if directions is None:
        if rng is None:
            raise LossError("swd needs an rng or explicit directions when d > 1")
        directions = random_directions(d, n_projections, rng)
    theta = np.asarray(directions, dtype=np.float64).reshape(d, -1)
    return wasserstein_1d(cond @ Tensor(theta), tgt @ theta).mean()


def loss_eval(spec: LossSpec, cond, target, rng: np.random.Generator | None = None) -> Tensor:
    if spec.kind == "mmd_v":
        return mmd_v(cond, target, spec.kernel)
    if spec.kind == "mmd_u":
        return mmd_u(cond, target, spec.kernel)
    if spec.kind == "mmd_u_sqrt":
        return mmd_u_sqrt(cond, target, spec.kernel, spec.epsilon)
    return swd(cond, target, spec.n_projections, rng)
