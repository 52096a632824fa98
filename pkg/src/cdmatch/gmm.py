"""Gaussian-mixture ground truth: conditioning, sampling, closed-form L2 and MMD.

Everything here is exact (no learned models), so it serves as the oracle the
rest of the package is checked against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp as np_logsumexp

from . import autodiff as ad

SETTINGS = ("2D", "5D", "10D", "toy")


class GMMError(ValueError):
    pass


def _check_pd(cov: np.ndarray, what: str) -> np.ndarray:
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise GMMError(f"{what} is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise GMMError(f"{what} is not positive definite") from None


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.means.ndim == 1:
            self.means = self.means[:, None]
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        if self.covariances.ndim == 1:
            self.covariances = self.covariances[:, None, None]
        k, d = self.means.shape
        if self.weights.shape != (k,) or self.covariances.shape != (k, d, d):
            raise GMMError(
                f"inconsistent shapes: weights {self.weights.shape}, means {self.means.shape}, "
                f"covariances {self.covariances.shape}")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise GMMError(f"weights must be nonnegative and sum to 1, got {self.weights}")
        self._chol = np.stack([_check_pd(c, f"covariance {i}") for i, c in enumerate(self.covariances)])

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def component_logpdf(self, pts: np.ndarray) -> np.ndarray:
        """(n, K) log N(pts; mu_k, Sigma_k)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        if pts.shape[1] != self.dim:
            pts = pts.reshape(-1, self.dim)
        out = np.empty((len(pts), self.n_components))
        for k in range(self.n_components):
            diff = pts - self.means[k]
            sol = np.linalg.solve(self._chol[k], diff.T)
            logdet = 2.0 * np.log(np.diag(self._chol[k])).sum()
            out[:, k] = -0.5 * (np.sum(sol * sol, axis=0) + logdet + self.dim * np.log(2 * np.pi))
        return out

    def logpdf(self, pts: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return np_logsumexp(self.component_logpdf(pts) + logw, axis=1)

    def pdf(self, pts: np.ndarray) -> np.ndarray:
        return np.exp(self.logpdf(pts))

    def marginal(self, dims: Sequence[int]) -> "GaussianMixture":
        dims = list(dims)
        return GaussianMixture(self.weights.copy(), self.means[:, dims],
                               self.covariances[:, dims][:, :, dims])

    def score(self, pts: np.ndarray) -> np.ndarray:
        """Analytic grad log p at each row of ``pts``."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64)).reshape(-1, self.dim)
        with np.errstate(divide="ignore"):
            logr = self.component_logpdf(pts) + np.log(self.weights)
        r = np.exp(logr - np_logsumexp(logr, axis=1)[:, None])
        out = np.zeros_like(pts)
        for k in range(self.n_components):
            out -= r[:, k:k + 1] * np.linalg.solve(self.covariances[k], (pts - self.means[k]).T).T
        return out

    def affine(self, scale, shift) -> "GaussianMixture":
        """Law of diag(scale) z + shift for z drawn from this mixture."""
        a = np.broadcast_to(np.asarray(scale, dtype=np.float64), (self.dim,))
        return GaussianMixture(self.weights.copy(), self.means * a + shift,
                               self.covariances * np.outer(a, a))

    def noised(self, alpha_bar: float) -> "GaussianMixture":
        """Law of sqrt(ab) x0 + sqrt(1 - ab) eps (forward diffusion marginal)."""
        ab = float(alpha_bar)
        return GaussianMixture(self.weights.copy(), self.means * np.sqrt(ab),
                               self.covariances * ab + (1.0 - ab) * np.eye(self.dim))

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "covariances": self.covariances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls(d["weights"], d["means"], d["covariances"])


@dataclass(frozen=True)
class SplitIndex:
    x_dims: tuple[int, ...]
    y_dims: tuple[int, ...]

    def __post_init__(self):
        if set(self.x_dims) & set(self.y_dims):
            raise GMMError("x_dims and y_dims overlap")
        if sorted(self.x_dims + self.y_dims) != list(range(len(self.x_dims) + len(self.y_dims))):
            raise GMMError("x_dims and y_dims must cover 0..d-1")


def condition(joint: GaussianMixture, split: SplitIndex, x, weight_floor: float = 0.0) -> GaussianMixture:
    """P(Y | X=x) by per-component Schur complements, low-weight components dropped."""
    if not 0.0 <= weight_floor < 1.0:
        raise GMMError(f"weight_floor must be in [0, 1), got {weight_floor}")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(-1)
    xd, yd = list(split.x_dims), list(split.y_dims)
    if len(x) != len(xd):
        raise GMMError(f"x has dimension {len(x)}, expected {len(xd)}")
    logw = np.empty(joint.n_components)
    means, covs = [], []
    for k in range(joint.n_components):
        mu, cov = joint.means[k], joint.covariances[k]
        sxx = cov[np.ix_(xd, xd)]
        syx = cov[np.ix_(yd, xd)]
        syy = cov[np.ix_(yd, yd)]
        try:
            cxx = np.linalg.cholesky(sxx)
        except np.linalg.LinAlgError:
            raise GMMError(f"singular X-block covariance in component {k}") from None
        diff = x - mu[xd]
        gain = np.linalg.solve(sxx, syx.T).T
        means.append(mu[yd] + gain @ diff)
        schur = syy - gain @ syx.T
        covs.append(0.5 * (schur + schur.T))
        sol = np.linalg.solve(cxx, diff)
        logdet = 2.0 * np.log(np.diag(cxx)).sum()
        with np.errstate(divide="ignore"):
            logw[k] = np.log(joint.weights[k]) - 0.5 * (sol @ sol + logdet + len(xd) * np.log(2 * np.pi))
    w = np.exp(logw - np_logsumexp(logw)) if np.isfinite(logw).any() else np.zeros_like(logw)
    keep = w > weight_floor if weight_floor > 0 else w > 0
    if not keep.any():
        raise GMMError(f"all components filtered out at weight_floor={weight_floor}")
    w = w[keep] / w[keep].sum()
    idx = np.flatnonzero(keep)
    return GaussianMixture(w, np.array([means[i] for i in idx]), np.array([covs[i] for i in idx]))


def sample(g: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise GMMError("n must be >= 1")
    comp = rng.choice(g.n_components, size=n, p=g.weights)
    z = rng.standard_normal((n, g.dim))
    return g.means[comp] + np.einsum("nij,nj->ni", g._chol[comp], z)


def _gauss_overlap(m1, c1, m2, c2) -> np.ndarray:
    """<N(m1_i, c1_i), N(m2_j, c2_j)> for all component pairs -> (K1, K2)."""
    d = m1.shape[1]
    out = np.empty((len(m1), len(m2)))
    for i in range(len(m1)):
        for j in range(len(m2)):
            s = c1[i] + c2[j]
            diff = m1[i] - m2[j]
            chol = np.linalg.cholesky(s)
            sol = np.linalg.solve(chol, diff)
            logdet = 2.0 * np.log(np.diag(chol)).sum()
            out[i, j] = np.exp(-0.5 * (sol @ sol + logdet + d * np.log(2 * np.pi)))
    return out


def l2_inner(p: GaussianMixture, q: GaussianMixture) -> float:
    if p.dim != q.dim:
        raise GMMError(f"dimension mismatch: {p.dim} vs {q.dim}")
    return float(p.weights @ _gauss_overlap(p.means, p.covariances, q.means, q.covariances) @ q.weights)


def l2_gmm_distance(p: GaussianMixture, q: GaussianMixture) -> float:
    # symmetrized so that d(p, q) == d(q, p) bit for bit
    cross = 0.5 * (l2_inner(p, q) + l2_inner(q, p))
    sq = (l2_inner(p, p) + l2_inner(q, q)) - 2.0 * cross
    return float(np.sqrt(max(sq, 0.0)))


def kernel_mean(p: GaussianMixture, q: GaussianMixture, bandwidths: Sequence[float]) -> float:
    """E k(Y, Y') for Y ~ p, Y' ~ q under k(a,b) = sum_l exp(-|a-b|^2 / h_l)."""
    if p.dim != q.dim:
        raise GMMError(f"dimension mismatch: {p.dim} vs {q.dim}")
    d = p.dim
    total = 0.0
    for h in bandwidths:
        # exp(-|u|^2/h) = (pi h)^{d/2} N(u; 0, (h/2) I)
        extra = np.broadcast_to(0.5 * h * np.eye(d), q.covariances.shape)
        ov = _gauss_overlap(p.means, p.covariances, q.means, q.covariances + extra)
        total += (np.pi * h) ** (d / 2) * float(p.weights @ ov @ q.weights)
    return total


def population_mmd2(p: GaussianMixture, q: GaussianMixture, bandwidths: Sequence[float]) -> float:
    return kernel_mean(p, p, bandwidths) - 2 * kernel_mean(p, q, bandwidths) + kernel_mean(q, q, bandwidths)


def multi_rbf_bandwidths(sigma: float, n: int = 5) -> list[float]:
    """Denominators sigma * 2^(l-3), l = 1..n, of the multi-bandwidth RBF."""
    return [sigma * 2.0 ** (l - 3) for l in range(1, n + 1)]


class AnalyticL2Loss:
    """Differentiable x -> ||P(Y|X=x) - G||_{L2} for a batch of x (shape (B, dX)).

    Conditioning is unfiltered so the loss is smooth in x. Returns a (B,) tensor.
    """

    def __init__(self, joint: GaussianMixture, split: SplitIndex, target: GaussianMixture,
                 eps: float = 1e-12):
        xd, yd = list(split.x_dims), list(split.y_dims)
        self.eps = eps
        K = joint.n_components
        self.mu_x = joint.means[:, xd]
        self.mu_y = joint.means[:, yd]
        self.gain, self.schur, self.prec_x, self.logc_x = [], [], [], []
        for k in range(K):
            c = joint.covariances[k]
            sxx, syx, syy = c[np.ix_(xd, xd)], c[np.ix_(yd, xd)], c[np.ix_(yd, yd)]
            g = np.linalg.solve(sxx, syx.T).T
            self.gain.append(g)
            self.schur.append(syy - g @ syx.T)
            self.prec_x.append(np.linalg.inv(sxx))
            _, logdet = np.linalg.slogdet(sxx)
            self.logc_x.append(np.log(joint.weights[k]) if joint.weights[k] > 0 else -np.inf)
            self.logc_x[-1] += -0.5 * (logdet + len(xd) * np.log(2 * np.pi))
        self.target = target
        dy = len(yd)
        # constant pairwise quantities
        self.pp = {}
        for k in range(K):
            for l in range(K):
                s = self.schur[k] + self.schur[l]
                _, logdet = np.linalg.slogdet(s)
                self.pp[k, l] = (np.linalg.inv(s), -0.5 * (logdet + dy * np.log(2 * np.pi)))
        self.pq = {}
        for k in range(K):
            for j in range(target.n_components):
                s = self.schur[k] + target.covariances[j]
                _, logdet = np.linalg.slogdet(s)
                self.pq[k, j] = (np.linalg.inv(s), -0.5 * (logdet + dy * np.log(2 * np.pi)))
        self.qq = l2_inner(target, target)
        self.K = K

    def __call__(self, x) -> ad.Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 1:
            x = ad.reshape(x, (-1, self.mu_x.shape[1]))
        logits, means = [], []
        for k in range(self.K):
            if not np.isfinite(self.logc_x[k]):
                continue
            diff = x - self.mu_x[k]
            quad = ((diff @ ad.Tensor(self.prec_x[k])) * diff).sum(axis=1, keepdims=True)
            logits.append(self.logc_x[k] - 0.5 * quad)
            means.append((k, self.mu_y[k] + diff @ ad.Tensor(self.gain[k].T)))
        logit = ad.concat(logits, axis=1)
        w = ad.exp(logit - ad.logsumexp(logit, axis=1).reshape(-1, 1))
        pp = 0.0
        pq = 0.0
        for a, (k, mk) in enumerate(means):
            wk = w[:, a]
            for b, (l, ml) in enumerate(means):
                if b < a:
                    continue
                cinv, logc = self.pp[k, l]
                dm = mk - ml
                val = ad.exp(logc - 0.5 * ((dm @ ad.Tensor(cinv)) * dm).sum(axis=1))
                term = wk * w[:, b] * val
                pp = pp + (term if a == b else 2.0 * term)
            for j in range(self.target.n_components):
                cinv, logc = self.pq[k, j]
                dm = mk - self.target.means[j]
                val = ad.exp(logc - 0.5 * ((dm @ ad.Tensor(cinv)) * dm).sum(axis=1))
                pq = pq + wk * (self.target.weights[j] * val)
        sq = pp - 2.0 * pq + self.qq
        return ad.sqrt(ad.clamp_min(sq, 0.0) + self.eps)


@dataclass
class TiltedPosterior:
    prior: GaussianMixture
    beta: float
    loss: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.beta < 0:
            raise GMMError("beta must be nonnegative")
        if self.prior.dim != 1:
            raise GMMError("tilted posterior is only supported for 1-D X")


def default_grid(x_star: float, n: int = 2001, half_width: float = 10.0) -> np.ndarray:
    return np.linspace(x_star - half_width, x_star + half_width, n)


def tilted_density(tp: TiltedPosterior, grid: np.ndarray) -> np.ndarray:
    """P(x) exp(-beta L(x)) on a 1-D grid, normalized by the trapezoid rule."""
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if len(grid) < 100:
        raise GMMError(f"grid too coarse: {len(grid)} points (need >= 100)")
    logp = tp.prior.logpdf(grid[:, None])
    if tp.beta > 0:
        logp = logp - tp.beta * np.asarray(tp.loss(grid), dtype=np.float64).reshape(-1)
    dens = np.exp(logp - logp.max())
    return dens / np.trapezoid(dens, grid)


def grid_cdf(grid: np.ndarray, density: np.ndarray) -> np.ndarray:
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * np.diff(grid))])
    return cdf / cdf[-1]


def w1_to_grid_density(samples: np.ndarray, grid: np.ndarray, density: np.ndarray) -> float:
    """1-D W1 between an empirical sample and a density tabulated on a grid: int |F_n - F|."""
    samples = np.sort(np.asarray(samples, dtype=np.float64).reshape(-1))
    lo = min(grid[0], samples[0])
    hi = max(grid[-1], samples[-1])
    pts = np.union1d(np.concatenate([[lo], grid, [hi]]), samples)
    f_model = np.interp(pts, grid, grid_cdf(grid, density), left=0.0, right=1.0)
    f_emp = np.searchsorted(samples, pts, side="right") / len(samples)
    # both CDFs are evaluated at the union of breakpoints; integrate |diff| piecewise
    diff = np.abs(f_emp - f_model)
    return float(np.sum(0.5 * (diff[1:] + diff[:-1]) * np.diff(pts)))


def w1_to_gmm(samples: np.ndarray, g: GaussianMixture, n_grid: int = 20001) -> float:
    """1-D W1 between an empirical sample and an analytic 1-D mixture."""
    if g.dim != 1:
        raise GMMError("w1_to_gmm needs a 1-D mixture")
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    sd = np.sqrt(g.covariances[:, 0, 0].max())
    lo = min(samples.min(), g.means.min() - 10 * sd)
    hi = max(samples.max(), g.means.max() + 10 * sd)
    grid = np.linspace(lo, hi, n_grid)
    from scipy.stats import norm
    cdf = np.zeros_like(grid)
    for w, m, c in zip(g.weights, g.means[:, 0], g.covariances[:, 0, 0]):
        cdf += w * norm.cdf(grid, m, np.sqrt(c))
    s = np.sort(samples)
    f_emp = np.searchsorted(s, grid, side="right") / len(s)
    diff = np.abs(f_emp - cdf)
    return float(np.sum(0.5 * (diff[1:] + diff[:-1]) * np.diff(grid)))


@dataclass
class Benchmark:
    name: str
    joint: GaussianMixture
    split: SplitIndex
    x_star: np.ndarray
    target: GaussianMixture
    filter_threshold: float

    @property
    def prior(self) -> GaussianMixture:
        return self.joint.marginal(self.split.x_dims)

    @property
    def x_dim(self) -> int:
        return len(self.split.x_dims)

    @property
    def y_dim(self) -> int:
        return len(self.split.y_dims)

    def conditional(self, x, weight_floor: float | None = None) -> GaussianMixture:
        floor = self.filter_threshold if weight_floor is None else weight_floor
        return condition(self.joint, self.split, x, floor)

    def sample_joint(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        z = sample(self.joint, n, rng)
        return z[:, list(self.split.x_dims)], z[:, list(self.split.y_dims)]


def load_parameter_file(path: str | Path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def benchmark_from_dict(name: str, spec: dict) -> Benchmark:
    joint = GaussianMixture(spec["weights"], spec["means"], spec["covariances"])
    split = SplitIndex(tuple(spec["split"]["x_dims"]), tuple(spec["split"]["y_dims"]))
    x_star = np.atleast_1d(np.asarray(spec["x_star"], dtype=np.float64))
    thr = float(spec["filter_threshold"])
    target = condition(joint, split, x_star, thr)
    return Benchmark(name, joint, split, x_star, target, thr)


def build_benchmark(setting: str) -> Benchmark:
    if setting not in SETTINGS:
        raise GMMError(f"unknown setting {setting!r}; expected one of {SETTINGS}")
    fname = f"gmm_{setting.lower()}.json"
    text = resources.files("cdmatch.data").joinpath(fname).read_text()
    return benchmark_from_dict(setting, json.loads(text))
