"""Neural-net building blocks: linear/norm/embedding layers, causal and
bidirectional attention (ALiBi bias, QK-norm, sliding windows, LayerScale),
causal convolutions, and Adam.

Everything runs on the numerics Tensor engine; batch-first [B, T, C] layout.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


class Module:
    """Parameter container; children discovered by attribute reflection."""

    def parameters(self) -> list[tuple[str, Tensor]]:
        """All parameter tensors, frozen ones included (for checkpoints)."""
        out: list[tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend((f"{name}.{k}", v) for k, v in value.parameters())
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend((f"{name}.{i}.{k}", v) for k, v in item.parameters())
                    elif isinstance(item, Tensor):
                        out.append((f"{name}.{i}", item))
        return out

    def param_tensors(self) -> list[Tensor]:
        """Trainable parameters only (requires_grad set)."""
        return [t for _, t in self.parameters() if t.requires_grad]

    def state_dict(self) -> dict[str, Tensor]:
        return dict(self.parameters())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.parameters())
        for name, arr in state.items():
            if name not in own:
                raise KeyError(f"unknown parameter {name!r}")
            if own[name].data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            own[name].data = arr.astype(own[name].data.dtype).copy()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        scale = 1.0 / math.sqrt(d_in)
        self.weight = Tensor(rng.normal(0.0, scale, size=(d_in, d_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / (var + self.eps).sqrt() * self.gamma + self.beta


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator, scale: float = 0.02):
        self.table = Tensor(rng.normal(0.0, scale, size=(vocab, dim)), requires_grad=True)

    def __call__(self, idx) -> Tensor:
        return T.embedding(self.table, idx)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    inner = 0.7978845608028654 * (x + 0.044715 * x * x * x)
    return 0.5 * x * (1.0 + inner.tanh())


def alibi_slopes(n_heads: int) -> np.ndarray:
    return np.asarray([2.0 ** (-8.0 * (i + 1) / n_heads) for i in range(n_heads)], dtype=np.float32)


@lru_cache(maxsize=None)
def attention_bias(
    t: int, n_heads: int, causal: bool, window: int | None, use_alibi: bool
) -> np.ndarray:
    """[heads, T, T] additive logit bias combining masks and ALiBi.

    A sliding window of size W lets position i attend to keys in
    [i - W + 1, i] (self plus W-1 lookback).
    """
    i = np.arange(t)[:, None]
    j = np.arange(t)[None, :]
    dist = i - j
    bias = np.zeros((n_heads, t, t), dtype=np.float32)
    if use_alibi:
        bias -= alibi_slopes(n_heads)[:, None, None] * np.abs(dist)[None]
    blocked = np.zeros((t, t), dtype=bool)
    if causal:
        blocked |= dist < 0
    if window is not None:
        blocked |= np.abs(dist) >= window
    bias = np.where(blocked[None], NEG_INF, bias)
    return bias


class SelfAttention(Module):
    """Multi-head self-attention with optional causal mask, sliding window,
    ALiBi positional bias, and QK normalization."""

    def __init__(
        self,
        width: int,
        n_heads: int,
        rng: np.random.Generator,
        causal: bool = True,
        window: int | None = None,
        use_alibi: bool = False,
        qk_norm_eps: float | None = None,
    ):
        if width % n_heads:
            raise ValueError("width must divide evenly into heads")
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        self.causal = causal
        self.window = window
        self.use_alibi = use_alibi
        self.qk_norm_eps = qk_norm_eps
        self.wq = Linear(width, width, rng)
        self.wk = Linear(width, width, rng)
        self.wv = Linear(width, width, rng)
        self.wo = Linear(width, width, rng)
        if qk_norm_eps is not None:
            # learned per-head logit scale; normalized q.k lives in [-1, 1]
            self.qk_scale = Tensor(
                np.full(n_heads, math.sqrt(self.head_dim)), requires_grad=True
            )

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        return x.reshape(b, t, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor) -> Tensor:
        b, t, width = x.shape
        q = self._split(self.wq(x), b, t)
        k = self._split(self.wk(x), b, t)
        v = self._split(self.wv(x), b, t)

        if self.qk_norm_eps is not None:
            q = q / ((q * q).sum(axis=-1, keepdims=True).sqrt() + self.qk_norm_eps)
            k = k / ((k * k).sum(axis=-1, keepdims=True).sqrt() + self.qk_norm_eps)
            scale = self.qk_scale.reshape(1, self.n_heads, 1, 1)
            logits = (q @ k.transpose(0, 1, 3, 2)) * scale
        else:
            logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))

        bias = attention_bias(t, self.n_heads, self.causal, self.window, self.use_alibi)
        logits = logits + Tensor(bias.astype(x.dtype) if x.dtype == np.float64 else bias)
        attn = T.softmax(logits, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, width)
        return self.wo(out)

    # -- incremental decoding (inference only, plain numpy) ----------------

    def step(self, x_t: np.ndarray, cache: dict) -> np.ndarray:
        """One decode step for a [B, width] input given cached keys/values."""
        b = x_t.shape[0]
        w = lambda lin: lin.weight.data
        bvec = lambda lin: lin.bias.data
        q = (x_t @ w(self.wq) + bvec(self.wq)).reshape(b, self.n_heads, self.head_dim)
        k = (x_t @ w(self.wk) + bvec(self.wk)).reshape(b, self.n_heads, self.head_dim)
        v = (x_t @ w(self.wv) + bvec(self.wv)).reshape(b, self.n_heads, self.head_dim)
        if "k" not in cache:
            cache["k"] = k[:, :, None]
            cache["v"] = v[:, :, None]
        else:
            cache["k"] = np.concatenate([cache["k"], k[:, :, None]], axis=2)
            cache["v"] = np.concatenate([cache["v"], v[:, :, None]], axis=2)
        ks, vs = cache["k"], cache["v"]  # [B, H, T, hd]
        if self.qk_norm_eps is not None:
            qn = q / (np.sqrt((q * q).sum(-1, keepdims=True)) + self.qk_norm_eps)
            kn = ks / (np.sqrt((ks * ks).sum(-1, keepdims=True)) + self.qk_norm_eps)
            logits = np.einsum("bhd,bhtd->bht", qn, kn) * self.qk_scale.data[None, :, None]
        else:
            logits = np.einsum("bhd,bhtd->bht", q, ks) / math.sqrt(self.head_dim)
        t_now = ks.shape[2] - 1
        if self.use_alibi:
            dist = t_now - np.arange(ks.shape[2])
            logits -= alibi_slopes(self.n_heads)[None, :, None] * dist[None, None, :]
        if self.window is not None:
            dist = t_now - np.arange(ks.shape[2])
            logits = np.where(dist[None, None, :] >= self.window, NEG_INF, logits)
        logits -= logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=-1, keepdims=True)
        out = np.einsum("bht,bhtd->bhd", p, vs).reshape(b, -1)
        return out @ w(self.wo) + bvec(self.wo)


class FeedForward(Module):
    def __init__(self, width: int, rng: np.random.Generator, mult: int = 4):
        self.up = Linear(width, width * mult, rng)
        self.down = Linear(width * mult, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(gelu(self.up(x)))

    def step(self, x_t: np.ndarray) -> np.ndarray:
        h = x_t @ self.up.weight.data + self.up.bias.data
        h = 0.5 * h * (1.0 + np.tanh(0.7978845608028654 * (h + 0.044715 * h**3)))
        return h @ self.down.weight.data + self.down.bias.data


class TransformerLayer(Module):
    """Pre-norm block; optional LayerScale on both residual branches."""

    def __init__(
        self,
        width: int,
        n_heads: int,
        rng: np.random.Generator,
        causal: bool = True,
        window: int | None = None,
        use_alibi: bool = False,
        qk_norm_eps: float | None = None,
        layerscale_init: float | None = None,
        ffn_mult: int = 4,
    ):
        self.norm1 = LayerNorm(width)
        self.attn = SelfAttention(
            width, n_heads, rng, causal=causal, window=window,
            use_alibi=use_alibi, qk_norm_eps=qk_norm_eps,
        )
        self.norm2 = LayerNorm(width)
        self.ffn = FeedForward(width, rng, mult=ffn_mult)
        if layerscale_init is not None:
            self.ls1 = Tensor(np.full(width, layerscale_init), requires_grad=True)
            self.ls2 = Tensor(np.full(width, layerscale_init), requires_grad=True)
        else:
            self.ls1 = self.ls2 = None

    def __call__(self, x: Tensor) -> Tensor:
        a = self.attn(self.norm1(x))
        x = x + (a * self.ls1 if self.ls1 is not None else a)
        f = self.ffn(self.norm2(x))
        return x + (f * self.ls2 if self.ls2 is not None else f)

    def step(self, x_t: np.ndarray, cache: dict) -> np.ndarray:
        def ln(norm: LayerNorm, v: np.ndarray) -> np.ndarray:
            mu = v.mean(-1, keepdims=True)
            c = v - mu
            var = (c * c).mean(-1, keepdims=True)
            return c / np.sqrt(var + norm.eps) * norm.gamma.data + norm.beta.data

        a = self.attn.step(ln(self.norm1, x_t), cache)
        x_t = x_t + (a * self.ls1.data if self.ls1 is not None else a)
        f = self.ffn.step(ln(self.norm2, x_t))
        return x_t + (f * self.ls2.data if self.ls2 is not None else f)


class TransformerStack(Module):
    def __init__(self, n_layers: int, width: int, n_heads: int, rng: np.random.Generator, **kw):
        self.layers = [TransformerLayer(width, n_heads, rng, **kw) for _ in range(n_layers)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def step(self, x_t: np.ndarray, caches: list[dict]) -> np.ndarray:
        for layer, cache in zip(self.layers, caches):
            x_t = layer.step(x_t, cache)
        return x_t

    def make_caches(self) -> list[dict]:
        return [{} for _ in self.layers]


class CausalConv1d(Module):
    """Left-padded conv over [B, T, C]; output length ceil(T / stride)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1):
        self.kernel = kernel
        self.stride = stride
        scale = 1.0 / math.sqrt(kernel * c_in)
        self.weight = Tensor(rng.normal(0.0, scale, size=(kernel * c_in, c_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        x = T.pad(x, ((0, 0), (self.kernel - 1, 0), (0, 0)))
        win = T.unfold1d(x, self.kernel, self.stride)  # [B, F, K, C]
        f = win.shape[1]
        return win.reshape(b, f, self.kernel * c) @ self.weight + self.bias


class CausalConvTranspose1d(Module):
    """Zero-insertion upsampling by `factor` followed by a causal conv."""

    def __init__(self, c_in: int, c_out: int, kernel: int, factor: int, rng: np.random.Generator):
        self.factor = factor
        self.conv = CausalConv1d(c_in, c_out, kernel, rng, stride=1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(T.dilate1d(x, self.factor))


class Conv2d(Module):
    """Same-padded conv over [B, H, W, C] maps; stride applies per axis."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
        kernel: tuple[int, int] = (3, 3),
        stride: tuple[int, int] = (1, 1),
    ):
        self.kernel = kernel
        self.stride = stride
        kh, kw = kernel
        scale = 1.0 / math.sqrt(kh * kw * c_in)
        self.weight = Tensor(rng.normal(0.0, scale, size=(kh * kw * c_in, c_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        kh, kw = self.kernel
        x = T.pad(x, ((0, 0), (kh // 2, (kh - 1) // 2), (kw // 2, (kw - 1) // 2), (0, 0)))
        win = T.unfold2d(x, self.kernel, self.stride)  # [B, H', W', kh, kw, C]
        nh, nw = win.shape[1], win.shape[2]
        return win.reshape(b, nh, nw, kh * kw * c) @ self.weight + self.bias


class Adam:
    """Adam with bias correction over an explicit parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1**self.t)
            vhat = self.v[i] / (1 - self.b2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, params: list[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad
