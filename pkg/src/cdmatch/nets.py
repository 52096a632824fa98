"""Small MLP backbone with sinusoidal time embedding and additive conditioning,
plus AdamW and JSON checkpoints shared by the diffusion and consistency models."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """(B,) time values -> (B, dim) [sin | cos] features."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass
class MlpConfig:
    in_dim: int
    out_dim: int
    cond_dim: int = 0
    blocks: int = 3
    units: int = 128
    time_embed_dim: int = 32


class MlpNet:
    """x -> out; per block h <- silu((h + time_emb + cond_proj) W + b).

    Dropped conditioning (mask 0, or ``cond=None``) uses a learned null embedding.
    """

    def __init__(self, cfg: MlpConfig, rng: np.random.Generator | None = None,
                 params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        if params is not None:
            self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
            return
        rng = rng if rng is not None else np.random.default_rng(0)
        u, p = cfg.units, {}

        def linear(name, fan_in, fan_out):
            bound = 1.0 / math.sqrt(fan_in)
            p[f"{name}.w"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            p[f"{name}.b"] = rng.uniform(-bound, bound, (fan_out,))

        linear("inp", cfg.in_dim, u)
        linear("time", cfg.time_embed_dim, u)
        if cfg.cond_dim:
            linear("cond", cfg.cond_dim, u)
            # learned stand-in for dropped conditioning; a zeroed projection would
            # be indistinguishable from a standardized input of 0
            p["cond.null"] = rng.normal(0.0, 1.0 / math.sqrt(u), (u,))
        for i in range(cfg.blocks):
            linear(f"block{i}", u, u)
        linear("out", u, cfg.out_dim)
        self.params = p

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def leaves(self) -> dict[str, Tensor]:
        """Fresh gradient-requiring leaves for one training step."""
        return {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}

    def __call__(self, x, t, cond=None, cond_mask: np.ndarray | None = None,
                 weights: dict[str, Tensor] | None = None) -> Tensor:
        w = weights if weights is not None else {k: Tensor(v) for k, v in self.params.items()}
        x = ad.as_tensor(x)
        n = x.shape[0]
        temb = sinusoidal_embedding(t, self.cfg.time_embed_dim)
        if temb.shape[0] == 1 and n > 1:
            temb = np.broadcast_to(temb, (n, temb.shape[1]))
        emb = ad.silu(Tensor(temb) @ w["time.w"] + w["time.b"])
        if self.cfg.cond_dim:
            if cond is None:
                emb = emb + w["cond.null"]
            else:
                c = ad.as_tensor(cond) @ w["cond.w"] + w["cond.b"]
                if cond_mask is not None:
                    keep = np.asarray(cond_mask, dtype=np.float64).reshape(-1, 1)
                    c = c * keep + w["cond.null"] * (1.0 - keep)
                emb = emb + c
        h = x @ w["inp.w"] + w["inp.b"]
        for i in range(self.cfg.blocks):
            h = ad.silu((h + emb) @ w[f"block{i}.w"] + w[f"block{i}.b"])
        return h @ w["out.w"] + w["out.b"]

    def to_dict(self) -> dict:
        return {"config": asdict(self.cfg),
                "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                           for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpNet":
        params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in d["params"].items()}
        return cls(MlpConfig(**d["config"]), params=params)


class AdamW:
    """Decoupled weight-decay Adam with cosine-annealed learning rate."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-4, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8, total_steps: int | None = None,
                 min_lr: float = 0.0):
        self.params = params
        self.lr, self.wd, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.total_steps = total_steps
        self.min_lr = min_lr
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.lr
        frac = min(self.t / self.total_steps, 1.0)
        return self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + math.cos(math.pi * frac))

    def step(self, grads: dict[str, np.ndarray]) -> None:
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            p = self.params[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p *= 1.0 - lr * self.wd
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class EmaWeights:
    """Exponential moving average of parameters; the averaged copy is what gets saved."""

    def __init__(self, params: dict[str, np.ndarray], decay: float = 0.999):
        self.decay = decay
        self.shadow = {k: v.copy() for k, v in params.items()}

    def update(self, params: dict[str, np.ndarray]) -> None:
        d = self.decay
        for k, v in params.items():
            self.shadow[k] *= d
            self.shadow[k] += (1.0 - d) * v

    def copy_to(self, params: dict[str, np.ndarray]) -> None:
        if self.decay == 0.0:
            return
        for k in params:
            params[k][...] = self.shadow[k]


class DivergenceError(RuntimeError):
    pass


class DivergenceGuard:
    """Abort when the loss stays above ``factor`` x its initial value for ``patience`` steps."""

    def __init__(self, factor: float = 10.0, patience: int = 100):
        self.factor, self.patience = factor, patience
        self.initial: float | None = None
        self.count = 0

    def update(self, loss: float, step: int) -> None:
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        if self.initial is None:
            self.initial = loss
            return
        self.count = self.count + 1 if loss > self.factor * self.initial else 0
        if self.count >= self.patience:
            raise DivergenceError(
                f"loss above {self.factor}x initial ({self.initial:.4g}) for {self.patience} steps at step {step}")


def save_json(obj: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj))
    tmp.replace(path)


def load_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
