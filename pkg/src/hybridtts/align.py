"""ASR-distillation alignment: pick cross-attention heads that agree with
word timestamps under DTW, build the soft token-to-frame alignment matrix,
and compute the cosine distillation loss over aligned latents.

Attention and hidden-state inputs come from files or the synthetic bundle
generator; no ASR model runs here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import tensor as T
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .numerics.dtw import dtw_path
from .numerics.signal import linear_interp, median_filter_1d
from .numerics.tensor import Tensor


@dataclass
class AttentionBundle:
    """Per-head cross-attention plus decoder hidden states from an ASR pass.

    attention: [heads, L, F_enc] non-negative weights
    hidden: [L, d] last-decoder-layer states
    timestamps: optional list of (token_index, start_s, end_s)
    encoder_frame_rate: Hz of the attention's frame axis
    """

    attention: np.ndarray
    hidden: np.ndarray
    timestamps: list[tuple[int, float, float]] | None
    encoder_frame_rate: float = 50.0

    def __post_init__(self):
        self.attention = np.asarray(self.attention, dtype=np.float32)
        self.hidden = np.asarray(self.hidden, dtype=np.float32)
        if self.attention.ndim != 3:
            raise ValueError("attention must be [heads, L, F_enc]")
        if (self.attention < 0).any():
            raise ValueError("attention weights must be non-negative")
        if self.attention.shape[1] < 1 or self.attention.shape[2] < 1:
            raise ValueError("need at least one token and one encoder frame")

    @property
    def n_heads(self) -> int:
        return self.attention.shape[0]


def head_timing_deviation(attn: np.ndarray, timestamps, frame_rate: float) -> float:
    """Mean absolute gap between DTW-implied token times and word midpoints.

    The DTW runs over 1 - attention; each token's predicted time is the mean
    encoder frame visited by the path in that token's row, times the frame
    period.
    """
    l, f = attn.shape
    path = dtw_path(1.0 - attn)
    frame_sum = np.zeros(l)
    frame_cnt = np.zeros(l)
    for i, j in path:
        frame_sum[i] += j
        frame_cnt[i] += 1
    pred_time = frame_sum / np.maximum(frame_cnt, 1) / frame_rate
    devs = [
        abs(pred_time[tok] - 0.5 * (start + end))
        for tok, start, end in timestamps
        if 0 <= tok < l
    ]
    if not devs:
        raise ValueError("no timestamps fall inside the token range")
    return float(np.mean(devs))


def select_heads(bundle: AttentionBundle, top_k: int) -> list[int]:
    """Indices of the top_k heads whose DTW paths best track the timestamps."""
    if bundle.timestamps is None:
        raise ValueError("bundle has no timestamps; pass an explicit head list instead")
    scores = [
        head_timing_deviation(bundle.attention[h], bundle.timestamps, bundle.encoder_frame_rate)
        for h in range(bundle.n_heads)
    ]
    order = sorted(range(bundle.n_heads), key=lambda h: (scores[h], h))
    return order[: max(1, min(top_k, bundle.n_heads))]


def build_alignment(
    bundle: AttentionBundle,
    heads: list[int],
    codec_frames: int,
    median_width: int = 7,
) -> np.ndarray:
    """Soft alignment [L, codec_frames], rows normalized to sum to 1.

    Per head: normalize across the token dimension (columns sum to 1),
    median-filter along encoder frames, then average heads, interpolate the
    frame axis to the codec rate, and renormalize rows.
    """
    if not heads:
        raise ValueError("need at least one head")
    if codec_frames < 1:
        raise ValueError("codec_frames must be >= 1")
    l, f_enc = bundle.attention.shape[1:]
    width = min(median_width, f_enc if f_enc % 2 else f_enc - 1)
    acc = np.zeros((l, f_enc), dtype=np.float64)
    for h in heads:
        a = bundle.attention[h].astype(np.float64)
        col = a.sum(axis=0, keepdims=True)
        a = np.divide(a, col, out=np.full_like(a, 1.0 / l), where=col > 0)
        if width >= 1:
            a = median_filter_1d(a, width) if width > 1 else a
        acc += a
    acc /= len(heads)
    if codec_frames != f_enc:
        acc = linear_interp(acc, codec_frames)
    rows = acc.sum(axis=1, keepdims=True)
    out = np.divide(acc, rows, out=np.full_like(acc, 1.0 / codec_frames), where=rows > 0)
    return out.astype(np.float32)


def asr_distill_loss(
    codec_semantic: Tensor,
    alignment: np.ndarray,
    hidden: np.ndarray,
    projector,
) -> Tensor:
    """1 - mean cosine similarity between aligned projected latents and the
    hidden-state targets; zero-norm rows contribute 1."""
    alignment = np.asarray(alignment, dtype=np.float32)
    hidden = np.asarray(hidden, dtype=np.float32)
    if codec_semantic.ndim != 2:
        raise ValueError("codec_semantic must be [F, d]")
    if alignment.shape[1] != codec_semantic.shape[0]:
        raise ValueError("alignment frame axis does not match latent frames")
    proj = projector(codec_semantic)  # [F, d]
    if proj.shape[1] != hidden.shape[1]:
        raise ValueError("projector output does not match hidden dimension")
    if alignment.shape[0] != hidden.shape[0]:
        raise ValueError("alignment token axis does not match hidden states")
    aligned = Tensor(alignment.astype(proj.data.dtype)) @ proj  # [L, d]
    h = Tensor(hidden.astype(proj.data.dtype))
    dot = (aligned * h).sum(axis=1)
    norms = (aligned * aligned).sum(axis=1).sqrt() * (h * h).sum(axis=1).sqrt()
    cos = dot / (norms + 1e-8)
    return 1.0 - cos.mean()


# -- bundle I/O and synthesis ---------------------------------------------------


def save_bundle(prefix: str, bundle: AttentionBundle) -> None:
    ts = bundle.timestamps or []
    ts_arr = np.asarray([[t, s, e] for t, s, e in ts], dtype=np.float32).reshape(len(ts), 3)
    save_checkpoint(
        prefix,
        {
            "attn": bundle.attention,
            "hidden": bundle.hidden,
            "timestamps": ts_arr,
            "frame_rate": np.asarray([bundle.encoder_frame_rate], dtype=np.float32),
        },
    )


def load_bundle(prefix: str) -> AttentionBundle:
    data = load_checkpoint(prefix)
    ts = [(int(r[0]), float(r[1]), float(r[2])) for r in data["timestamps"]]
    return AttentionBundle(
        attention=data["attn"],
        hidden=data["hidden"],
        timestamps=ts or None,
        encoder_frame_rate=float(data["frame_rate"][0]),
    )


def synthetic_bundle(
    rng: np.random.Generator,
    n_heads: int = 4,
    n_tokens: int = 12,
    n_frames: int = 24,
    hidden_dim: int = 16,
    encoder_frame_rate: float = 50.0,
    n_good_heads: int = 1,
) -> AttentionBundle:
    """Bundle with `n_good_heads` near-diagonal heads and noisy remainders,
    plus timestamps consistent with the diagonal."""
    attn = rng.random((n_heads, n_tokens, n_frames)).astype(np.float32) * 0.5
    for h in range(n_good_heads):
        for tok in range(n_tokens):
            center = tok * (n_frames - 1) / max(n_tokens - 1, 1)
            attn[h, tok] = np.exp(-0.5 * ((np.arange(n_frames) - center) / 1.0) ** 2)
    attn /= attn.sum(axis=2, keepdims=True)
    hidden = rng.normal(0, 1, size=(n_tokens, hidden_dim)).astype(np.float32)
    timestamps = []
    for tok in range(n_tokens):
        center = tok * (n_frames - 1) / max(n_tokens - 1, 1) / encoder_frame_rate
        timestamps.append((tok, center - 0.01, center + 0.01))
    return AttentionBundle(attn, hidden, timestamps, encoder_frame_rate)
