"""Flow-matching acoustic head: a small bidirectional transformer over the
3-token inner sequence (conditioning state, time, current sample), the
conditional flow-matching loss, and the CFG Euler sampler with FSQ
discretization.

Convention: data lives at t=0, noise at t=1, and the path is
x_t = (1-t)*x0 + t*x1 with constant target velocity u = x1 - x0; sampling
integrates from t=1 down to t=0 via x_{t-dt} = x_t - v_t*dt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import tensor as T
from .numerics import nn
from .numerics.signal import sinusoidal_embed
from .numerics.tensor import Tensor
from .quantize import fsq_indices_of, fsq_levels


@dataclass
class FlowMatchConfig:
    x_dim: int = 36
    cond_dim: int = 64
    width: int = 64
    layers: int = 3
    t_embed_scale: float = 1000.0
    cond_dropout: float = 0.1
    fsq_levels: int = 21

    @property
    def n_heads(self) -> int:
        return max(1, self.width // 32)


@dataclass
class SamplerConfig:
    nfe: int = 8
    cfg_alpha: float = 1.2

    def __post_init__(self):
        if self.nfe < 1:
            raise ValueError("nfe must be >= 1")
        if self.cfg_alpha < 0:
            raise ValueError("cfg_alpha must be >= 0")

    @property
    def dt(self) -> float:
        return 1.0 / self.nfe


@dataclass
class PathSample:
    """One interpolation point: data x0, noise x1, time t."""

    x0: np.ndarray
    x1: np.ndarray
    t: float

    @property
    def x_t(self) -> np.ndarray:
        return (1.0 - self.t) * self.x0 + self.t * self.x1

    @property
    def u_t(self) -> np.ndarray:
        return self.x1 - self.x0


class FlowMatchHead(nn.Module):
    """Bidirectional transformer over (h, t, x_t); separate projections per
    input because their activation scales differ. Output is read from the
    x_t position."""

    INNER_SEQ_LEN = 3

    def __init__(self, cfg: FlowMatchConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.proj_h = nn.Linear(cfg.cond_dim, cfg.width, rng)
        self.proj_t = nn.Linear(cfg.width, cfg.width, rng)
        self.proj_x = nn.Linear(cfg.x_dim, cfg.width, rng)
        self.stack = nn.TransformerStack(
            cfg.layers, cfg.width, cfg.n_heads, rng, causal=False, window=None, use_alibi=False
        )
        self.out = nn.Linear(cfg.width, cfg.x_dim, rng)
        self.calls = 0

    def _t_embed(self, t: np.ndarray) -> np.ndarray:
        return np.stack([sinusoidal_embed(float(v), self.cfg.width, self.cfg.t_embed_scale) for v in t])

    def __call__(self, x_t: Tensor, t: np.ndarray, h: Tensor) -> Tensor:
        """Velocity for a batch: x_t [B, x_dim], t [B], h [B, cond_dim]."""
        self.calls += 1
        b = x_t.shape[0]
        tok_h = self.proj_h(h)
        tok_t = self.proj_t(Tensor(self._t_embed(np.atleast_1d(t)).astype(x_t.data.dtype)))
        tok_x = self.proj_x(x_t)
        seq = T.stack([tok_h, tok_t, tok_x], axis=1)  # [B, 3, width]
        out = self.stack(seq)
        return self.out(out[:, 2, :])


def unconditional(h_like: Tensor | np.ndarray) -> Tensor:
    """The null conditioning: zeros with the same shape as h."""
    data = h_like.data if isinstance(h_like, Tensor) else np.asarray(h_like)
    return Tensor(np.zeros_like(data))


def fm_loss(
    head: FlowMatchHead,
    samples: list[PathSample],
    h: Tensor,
    rng: np.random.Generator,
    cond_dropout: float | None = None,
    weights: np.ndarray | None = None,
) -> Tensor:
    """Mean squared velocity error over the batch, with the conditioning
    zeroed for a cond_dropout fraction of elements."""
    p_drop = head.cfg.cond_dropout if cond_dropout is None else cond_dropout
    x_t = Tensor(np.stack([s.x_t for s in samples]).astype(np.float32))
    u = Tensor(np.stack([s.u_t for s in samples]).astype(np.float32))
    t = np.asarray([s.t for s in samples])
    if p_drop > 0:
        keep = (rng.random(len(samples)) >= p_drop).astype(np.float32)[:, None]
        h = h * Tensor(keep)
    v = head(x_t, t, h)
    err = ((v - u) ** 2.0).sum(axis=1)
    if weights is not None:
        w = np.asarray(weights, dtype=np.float32)
        return (err * Tensor(w)).sum() * (1.0 / max(float(w.sum()), 1e-8))
    return err.mean()


def draw_path_samples(
    x0_batch: np.ndarray, rng: np.random.Generator
) -> list[PathSample]:
    """Uniform t and standard-normal noise per element."""
    x0_batch = np.atleast_2d(x0_batch)
    ts = rng.uniform(0.0, 1.0, size=len(x0_batch))
    noise = rng.standard_normal(x0_batch.shape).astype(np.float32)
    return [PathSample(x0=x0_batch[i], x1=noise[i], t=float(ts[i])) for i in range(len(x0_batch))]


def cfg_velocity(head, x_t: Tensor, t: np.ndarray, h: Tensor, alpha: float) -> Tensor:
    """alpha * v(x,t,h) + (1 - alpha) * v(x,t,0); both branches always run."""
    v_cond = head(x_t, t, h)
    v_uncond = head(x_t, t, unconditional(h))
    return alpha * v_cond + (1.0 - alpha) * v_uncond


def sample(
    head,
    h: Tensor | np.ndarray,
    config: SamplerConfig,
    rng: np.random.Generator,
    velocity_fn=None,
    x1: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Euler integration from noise at t=1 down to t=0, then FSQ snapping.

    velocity_fn overrides the CFG field (used by tests and stub fields);
    it receives (x_t Tensor, t array, h Tensor) and returns a Tensor.
    Returns (float values [B, x_dim], FSQ indices [B, x_dim]).
    """
    h = h if isinstance(h, Tensor) else Tensor(np.atleast_2d(np.asarray(h, dtype=np.float32)))
    if h.ndim == 1:
        h = h.reshape(1, h.shape[0])
    b = h.shape[0]
    x_dim = head.cfg.x_dim if hasattr(head, "cfg") else None
    if x1 is None:
        x1 = rng.standard_normal((b, x_dim)).astype(np.float32)
    x = Tensor(np.atleast_2d(x1).astype(np.float32))
    dt = config.dt
    with T.no_grad():
        for k in range(config.nfe):
            t_now = 1.0 - k * dt
            t_arr = np.full(b, t_now, dtype=np.float32)
            if velocity_fn is not None:
                v = velocity_fn(x, t_arr, h)
            else:
                v = cfg_velocity(head, x, t_arr, h, config.cfg_alpha)
            if not np.isfinite(v.data).all():
                raise FloatingPointError(f"non-finite velocity at step {k} (t={t_now:.4f})")
            x = Tensor(x.data - v.data * dt)
    levels = head.cfg.fsq_levels if hasattr(head, "cfg") else 21
    clamped = np.clip(x.data, -1.0, 1.0)
    idx = fsq_indices_of(clamped, levels)
    values = fsq_levels(levels)[idx]
    return x.data.copy(), idx


# -- toy two-cluster task (learning checks and the NFE/alpha sweep) -----------


@dataclass
class TwoClusterTask:
    """2-D two-Gaussian dataset with one conditioning vector per cluster."""

    centers: np.ndarray
    sigma: float
    cond: np.ndarray  # [2, cond_dim]

    @classmethod
    def default(cls, cond_dim: int = 8) -> "TwoClusterTask":
        centers = np.asarray([[-1.0, -1.0], [1.0, 1.0]], dtype=np.float32)
        cond = np.zeros((2, cond_dim), dtype=np.float32)
        cond[0, 0] = 1.0
        cond[1, 1] = 1.0
        return cls(centers=centers, sigma=0.12, cond=cond)

    def draw(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.integers(0, 2, size=n)
        x0 = self.centers[labels] + self.sigma * rng.standard_normal((n, 2)).astype(np.float32)
        return x0.astype(np.float32), labels

    def nearest_center(self, x: np.ndarray) -> np.ndarray:
        d = ((x[:, None, :] - self.centers[None]) ** 2).sum(-1)
        return d.argmin(axis=1)


def train_two_cluster_head(
    rng: np.random.Generator,
    steps: int = 2000,
    batch: int = 128,
    width: int = 64,
    cond_dim: int = 8,
    lr: float = 2e-3,
) -> tuple[FlowMatchHead, TwoClusterTask]:
    """Train a toy head on the two-cluster task; returns (head, task)."""
    task = TwoClusterTask.default(cond_dim)
    cfg = FlowMatchConfig(x_dim=2, cond_dim=cond_dim, width=width, layers=3)
    head = FlowMatchHead(cfg, rng)
    opt = nn.Adam(head.param_tensors(), lr=lr)
    for _ in range(steps):
        x0, labels = task.draw(rng, batch)
        samples = draw_path_samples(x0, rng)
        h = Tensor(task.cond[labels])
        loss = fm_loss(head, samples, h, rng)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
    return head, task


def evaluate_two_cluster(
    head: FlowMatchHead,
    task: TwoClusterTask,
    config: SamplerConfig,
    rng: np.random.Generator,
    n: int = 1000,
) -> dict[str, float]:
    """Sample n points conditioned on random clusters; report how many land
    within 3 sigma of any center and on the requested cluster."""
    labels = rng.integers(0, 2, size=n)
    h = Tensor(task.cond[labels])
    values, _ = sample(head, h, config, rng)
    dists = np.sqrt(((values[:, None, :] - task.centers[None]) ** 2).sum(-1))
    nearest = dists.argmin(axis=1)
    within = dists.min(axis=1) <= 3.0 * task.sigma
    return {
        "within_3_sigma": float(within.mean()),
        "cond_accuracy": float((nearest == labels).mean()),
        "mean_center_dist": float(dists.min(axis=1).mean()),
    }
