"""Empirical checks of the estimator theory: loss concentration, gradient
bias/variance, tape-size ratios and the shared-noise student/teacher fidelity gap."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import gmm
from .autodiff import Tape, Tensor
from .losses import KernelSpec, LossSpec, loss_eval

# f(x, noise) -> (n, dy) Tensor, differentiable in x (x has shape (n, dx))
PairedSampler = Callable[[Tensor, np.ndarray], Tensor]


def loglog_slope(n: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope and R^2 of log y against log n."""
    lx, ly = np.log(np.asarray(n, dtype=float)), np.log(np.asarray(y, dtype=float))
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    ss = np.sum((ly - ly.mean()) ** 2)
    return float(coef[0]), float(1.0 - np.sum(resid ** 2) / ss) if ss > 0 else 1.0


def linear_r2(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """(slope, intercept, R^2) of an ordinary least-squares line."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss = np.sum((y - y.mean()) ** 2)
    return float(slope), float(icpt), float(1.0 - np.sum(resid ** 2) / ss) if ss > 0 else 1.0


def bootstrap_ci(values: np.ndarray, stat: Callable[[np.ndarray], float], rng: np.random.Generator,
                 n_boot: int = 1000, level: float = 0.95) -> tuple[float, float]:
    values = np.asarray(values)
    idx = rng.integers(0, len(values), size=(n_boot, len(values)))
    stats = np.array([stat(values[i]) for i in idx])
    lo, hi = np.nanpercentile(stats, [50 * (1 - level), 50 * (1 + level)])
    return float(lo), float(hi)


def tukey_outliers(v: np.ndarray) -> np.ndarray:
    """Boolean mask of values outside [Q1 - 1.5 IQR, Q3 + 1.5 IQR]; non-finite values are flagged."""
    v = np.asarray(v, dtype=float)
    finite = np.isfinite(v)
    mask = ~finite
    if finite.sum() >= 1:
        q1, q3 = np.percentile(v[finite], [25, 75])
        iqr = q3 - q1
        mask |= finite & ((v < q1 - 1.5 * iqr) | (v > q3 + 1.5 * iqr))
    return mask


# ---- student/teacher fidelity under shared noise

@dataclass
class FidelityReport:
    eps_dist: float
    eps_g_dist: float
    y_bar: float
    j_bar: float
    r_s: float
    r_g: float
    ratio: float
    records: list[dict] = field(default_factory=list)
    outliers: list[bool] = field(default_factory=list)
    ci: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: list[dict]) -> "FidelityReport":
        """Aggregate per-input records; recomputing from stored records gives identical numbers."""
        gap = np.array([r["out_gap_sq"] for r in records])
        jgap = np.array([r["jac_gap_sq"] for r in records])
        ysq = np.array([r["y_sq"] for r in records])
        jmean = np.array([r["jac_norm_mean"] for r in records])
        eps_dist = float(np.sqrt(gap.mean()))
        eps_g = float(np.sqrt(jgap.mean()))
        y_bar = float(np.sqrt(ysq.mean()))
        j_bar = float(np.sqrt((jmean ** 2).mean()))
        r_s = _safe_div(eps_dist, y_bar)
        r_g = _safe_div(eps_g, j_bar)
        per = np.array([_safe_div(_safe_div(np.sqrt(r["jac_gap_sq"]), r["jac_norm_mean"]),
                                  _safe_div(np.sqrt(r["out_gap_sq"]), np.sqrt(r["y_sq"])))
                        for r in records])
        return cls(eps_dist, eps_g, y_bar, j_bar, r_s, r_g, _safe_div(r_g, r_s), records,
                   tukey_outliers(per).tolist())

    def without_outliers(self) -> "FidelityReport":
        keep = [r for r, o in zip(self.records, self.outliers) if not o]
        return FidelityReport.from_records(keep)

    def to_dict(self) -> dict:
        return asdict(self)


def _safe_div(a: float, b: float) -> float:
    if b == 0:
        return float("nan") if a == 0 else float("inf")
    return float(a / b)


def unit_directions(dim: int, D: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((D, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _outputs_and_vjps(f: PairedSampler, x: np.ndarray, noise: np.ndarray, dirs: np.ndarray):
    """Row-wise outputs (N, dy) and directional Jacobians v_d^T d f_i / d x_i as (D, N, dx)."""
    xt = Tensor(x, requires_grad=True)
    with Tape(retain=True) as tape:
        y = f(xt, noise)
        roots = [(y * d).sum() for d in dirs]
    vjps = np.stack([tape.backward(r)[xt] for r in roots])
    tape.free()
    return y.data, vjps


def measure_eps(student: PairedSampler, teacher: PairedSampler, xs: np.ndarray, noise: np.ndarray,
                D: int = 10, rng: np.random.Generator | None = None, n_boot: int = 1000) -> FidelityReport:
    """Shared-noise output and directional-Jacobian gaps over inputs ``xs`` (N, dx).

    ``noise`` is shared by both samplers, one draw per input row. Direction
    vectors are drawn once and reused for every input and both models.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    dirs = unit_directions(student(Tensor(xs), noise).shape[1], D, rng)
    y_s, j_s = _outputs_and_vjps(student, xs, noise, dirs)
    y_t, j_t = _outputs_and_vjps(teacher, xs, noise, dirs)
    records = []
    for i in range(len(xs)):
        records.append({
            "x": xs[i].tolist(),
            "out_gap_sq": float(np.sum((y_s[i] - y_t[i]) ** 2)),
            "jac_gap_sq": float(np.mean(np.sum((j_s[:, i] - j_t[:, i]) ** 2, axis=1))),
            "y_sq": float(np.sum(y_s[i] ** 2)),
            "jac_norm_mean": float(np.mean(np.linalg.norm(j_s[:, i], axis=1))),
        })
    rep = FidelityReport.from_records(records)
    if n_boot and len(records) > 1:
        idx_stat = lambda key: (lambda ix: getattr(FidelityReport.from_records([records[k] for k in ix]), key))
        ix = np.arange(len(records))
        rep.ci = {k: bootstrap_ci(ix, idx_stat(k), rng, n_boot) for k in ("r_s", "r_g", "ratio")}
    return rep


def counterexample_pair(eps: float) -> tuple[PairedSampler, PairedSampler]:
    """Teacher x and student x + eps sin(x / eps^2): close outputs, far Jacobians."""
    teacher = lambda x, noise: x * 1.0
    student = lambda x, noise: x + ad.sin(x * (1.0 / eps ** 2)) * eps
    return student, teacher


def fidelity_csv(groups: dict[str, FidelityReport]) -> str:
    """Table with group, r_s [CI], r_g [CI], ratio [CI]."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "r_s", "r_s_lo", "r_s_hi", "r_g", "r_g_lo", "r_g_hi", "ratio", "ratio_lo", "ratio_hi", "n"])
    for name, rep in groups.items():
        row = [name]
        for k in ("r_s", "r_g", "ratio"):
            lo, hi = rep.ci.get(k, (float("nan"), float("nan")))
            row += [f"{getattr(rep, k):.6g}", f"{lo:.6g}", f"{hi:.6g}"]
        w.writerow(row + [len(rep.records)])
    return buf.getvalue()


# ---- exact reparameterized conditional sampler for a single-Gaussian slice

class GaussianConditionalSampler:
    """y = mu_Y + A (x - mu_X) + L eta for a one-component joint; exact and differentiable."""

    def __init__(self, joint: gmm.GaussianMixture, split: gmm.SplitIndex, component: int = 0):
        xd, yd = list(split.x_dims), list(split.y_dims)
        c = joint.covariances[component]
        sxx, syx = c[np.ix_(xd, xd)], c[np.ix_(yd, xd)]
        self.gain = np.linalg.solve(sxx, syx.T).T
        self.chol = np.linalg.cholesky(c[np.ix_(yd, yd)] - self.gain @ syx.T)
        self.mu_x = joint.means[component, xd]
        self.mu_y = joint.means[component, yd]
        self.dy = len(yd)

    def conditional(self, x) -> gmm.GaussianMixture:
        mean = self.mu_y + self.gain @ (np.asarray(x, dtype=float) - self.mu_x)
        return gmm.GaussianMixture([1.0], [mean], [self.chol @ self.chol.T])

    def noise(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.dy))

    def from_noise(self, x, noise: np.ndarray) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 1:
            x = ad.reshape(x, (1, -1))
        mean = (x - self.mu_x) @ Tensor(self.gain.T) + self.mu_y
        return mean + noise @ self.chol.T

    def __call__(self, x, n: int, rng: np.random.Generator) -> Tensor:
        return self.from_noise(x, self.noise(n, rng))


# ---- concentration of the plug-in loss

@dataclass
class ConcentrationResult:
    n_grid: list[int]
    rms_error: list[float]
    mean_estimate: list[float]
    population: float
    slope: float
    r2: float

    def rows(self) -> list[dict]:
        return [{"n": n, "rms_error": e, "mean_estimate": m}
                for n, e, m in zip(self.n_grid, self.rms_error, self.mean_estimate)]


def concentration_experiment(conditional_sample: Callable[[int, np.random.Generator], np.ndarray],
                             target_sample: Callable[[int, np.random.Generator], np.ndarray],
                             population: float, n_grid: Sequence[int], repeats: int,
                             rng: np.random.Generator, spec: LossSpec | None = None) -> ConcentrationResult:
    """RMS of |L_hat(n) - L_population| over repeats for each n; log-log slope fit.

    The default is the unbiased U-statistic, so the error is pure fluctuation;
    the V-statistic adds an O(1/n) bias that steepens the fit at small n.
    """
    if len(n_grid) < 3:
        raise ValueError("need at least 3 sample sizes to fit a rate")
    spec = spec or LossSpec("mmd_u", KernelSpec("multi_rbf", 1.0))
    rms, means = [], []
    for n in n_grid:
        vals = np.array([loss_eval(spec, Tensor(conditional_sample(n, rng)), target_sample(n, rng), rng).item()
                         for _ in range(repeats)])
        rms.append(float(np.sqrt(np.mean((vals - population) ** 2))))
        means.append(float(vals.mean()))
    slope, r2 = loglog_slope(n_grid, rms)
    return ConcentrationResult(list(n_grid), rms, means, population, slope, r2)


# ---- gradient bias / variance

@dataclass
class GradientStudy:
    n_grid: list[int]
    mean_grad: list[list[float]]
    std_err: list[list[float]]
    variance: list[float]  # mean over coordinates
    reference: list[float]
    var_slope: float
    grads: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def bias(self, i: int = -1) -> np.ndarray:
        return np.asarray(self.mean_grad[i]) - np.asarray(self.reference)

    def z_scores(self) -> np.ndarray:
        """(bias / standard error) for every n and coordinate."""
        b = np.asarray(self.mean_grad) - np.asarray(self.reference)[None, :]
        return b / np.asarray(self.std_err)

    def bias_ci(self, rng: np.random.Generator, i: int = -1, n_boot: int = 1000) -> list[tuple[float, float]]:
        g = self.grads[self.n_grid[i]]
        ref = np.asarray(self.reference)
        return [bootstrap_ci(g[:, k], lambda v: float(v.mean() - ref[k]), rng, n_boot) for k in range(g.shape[1])]


def population_gradient(cond_fn: Callable[[np.ndarray], gmm.GaussianMixture], target: gmm.GaussianMixture,
                        x: np.ndarray, bandwidths: Sequence[float], h: float = 1e-5) -> np.ndarray:
    """Central finite difference of the closed-form population MMD^2 in x."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (gmm.population_mmd2(cond_fn(x + e), target, bandwidths)
                - gmm.population_mmd2(cond_fn(x - e), target, bandwidths)) / (2 * h)
    return g


def gradient_bias_variance(sampler, x: np.ndarray, target: gmm.GaussianMixture, reference: np.ndarray,
                           n_grid: Sequence[int], repeats: int, rng: np.random.Generator,
                           spec: LossSpec | None = None) -> GradientStudy:
    """Mean and spread of grad_x L_hat over repeats; fresh target sample (size n) per repeat."""
    spec = spec or LossSpec("mmd_u", KernelSpec("multi_rbf", 1.0))
    x = np.asarray(x, dtype=float)
    means, ses, var, store = [], [], [], {}
    for n in n_grid:
        g = np.empty((repeats, len(x)))
        for r in range(repeats):
            xt = Tensor(x, requires_grad=True)
            tgt = gmm.sample(target, n, rng)
            with Tape() as tape:
                val = loss_eval(spec, sampler(xt, n, rng), tgt, rng)
            g[r] = tape.backward(val)[xt]
        store[n] = g
        means.append(g.mean(axis=0).tolist())
        ses.append((g.std(axis=0, ddof=1) / np.sqrt(repeats)).tolist())
        var.append(float(g.var(axis=0, ddof=1).mean()))
    slope, _ = loglog_slope(n_grid, var)
    return GradientStudy(list(n_grid), means, ses, var, np.asarray(reference).tolist(), slope, store)


# ---- tape size of unrolled samplers

@dataclass
class MemoryRow:
    sampler: str
    steps: int
    n_cond: int
    nodes: int
    depth: int
    activations: int

    @property
    def activations_per_sample(self) -> float:
        return self.activations / self.n_cond


def tape_stats(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> tuple[int, int, int]:
    """(nodes, depth, activations) of recording x -> fn(x) -> sum."""
    xt = Tensor(np.asarray(x, dtype=float), requires_grad=True)
    with Tape() as tape:
        fn(xt).sum()
    return tape.n_nodes, tape.depth, tape.activations


def memory_ratio_experiment(K_list: Sequence[int], n_cond: int, teacher_fn: Callable[[int], Callable],
                            student_fn: Callable, x: np.ndarray, noise_fn: Callable[[int], np.ndarray]) -> dict:
    """Tape counts for teacher(K) chains and the single-step student at one candidate x.

    ``teacher_fn(K)`` returns ``f(x, noise)``; ``student_fn`` likewise. ``K = 0`` is
    the empty chain and gives the fixed overhead, which is subtracted before
    forming per-sample ratios.
    """
    rows: list[MemoryRow] = []
    noise = noise_fn(n_cond)
    base = tape_stats(lambda xt: teacher_fn(0)(xt, noise), x)
    rows.append(MemoryRow("teacher", 0, n_cond, *base))
    for K in K_list:
        rows.append(MemoryRow("teacher", K, n_cond, *tape_stats(lambda xt: teacher_fn(K)(xt, noise), x)))
    stud = tape_stats(lambda xt: student_fn(xt, noise), x)
    rows.append(MemoryRow("student", 1, n_cond, *stud))
    noise2 = noise_fn(2 * n_cond)
    doubled = {K: MemoryRow("teacher", K, 2 * n_cond, *tape_stats(lambda xt: teacher_fn(K)(xt, noise2), x))
               for K in K_list}
    overhead = base[0]
    ratios = {K: (r.nodes - overhead) / (stud[0] - overhead) for K, r in
              ((r.steps, r) for r in rows if r.sampler == "teacher" and r.steps > 0)}
    act_ratios = {K: (r.activations - base[2]) / (stud[2] - base[2]) for K, r in
                  ((r.steps, r) for r in rows if r.sampler == "teacher" and r.steps > 0)}
    ks = [r.steps for r in rows if r.sampler == "teacher"]
    nodes = [r.nodes for r in rows if r.sampler == "teacher"]
    slope, icpt, r2 = linear_r2(ks, nodes)
    doubling = {K: doubled[K].activations / next(r.activations for r in rows
                                                 if r.sampler == "teacher" and r.steps == K)
                for K in K_list}
    return {"rows": rows + list(doubled.values()), "overhead_nodes": overhead, "node_ratio": ratios,
            "activation_ratio": act_ratios, "fit": {"slope": slope, "intercept": icpt, "r2": r2},
            "doubling_activation_ratio": doubling}
