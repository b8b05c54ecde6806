"""Discrete bottleneck: learned vector quantizer for the semantic latent,
finite scalar quantization with dither-style training for the acoustic
latent, the bitrate calculator, and token-frame serialization.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import tensor as T
from .numerics.tensor import Tensor


@dataclass
class FSQConfig:
    num_dims: int = 36
    levels: int = 21
    p_quantize: float = 0.5
    p_dither: float = 0.25
    p_passthrough: float = 0.25
    # amplitude of the dither noise; half a bin when levels partition [-1, 1]
    dither_amplitude: float | None = None

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("need at least 2 FSQ levels")
        total = self.p_quantize + self.p_dither + self.p_passthrough
        if abs(total - 1.0) > 1e-9:
            raise ValueError("FSQ mode probabilities must sum to 1")
        if self.dither_amplitude is None:
            self.dither_amplitude = 1.0 / self.levels


def fsq_levels(levels: int) -> np.ndarray:
    """Centers of `levels` equal bins partitioning [-1, 1]: -1 + (2k+1)/L."""
    k = np.arange(levels, dtype=np.float64)
    return (-1.0 + (2.0 * k + 1.0) / levels).astype(np.float32)


def fsq_indices_of(y: np.ndarray, levels: int) -> np.ndarray:
    """Nearest-center index per coordinate of a tanh-bounded array."""
    # float64 binning avoids fp32 boundary ties against the exhaustive oracle
    idx = np.floor((y.astype(np.float64) + 1.0) * levels / 2.0).astype(np.int64)
    return np.clip(idx, 0, levels - 1)


def fsq_quantize(x: Tensor | np.ndarray, levels: int = 21) -> tuple[np.ndarray, Tensor]:
    """tanh then snap each coordinate to the nearest of L uniform levels.

    Returns (indices, values); values carry a straight-through gradient back
    to x, so training sees the quantizer as identity.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = T.tanh(x)
    idx = fsq_indices_of(y.data, levels)
    centers = fsq_levels(levels).astype(y.data.dtype)
    values = T.straight_through(y, centers[idx])
    return idx, values


def fsq_values_of(indices: np.ndarray, levels: int = 21) -> np.ndarray:
    return fsq_levels(levels)[np.asarray(indices, dtype=np.int64)]


def fsq_train_forward(x: Tensor, rng: np.random.Generator, cfg: FSQConfig) -> Tensor:
    """Training-time bottleneck draw for one sample: quantize / dither / pass.

    The mode is drawn once per call (per sample); dither adds uniform noise
    of the configured amplitude to tanh(x).
    """
    u = rng.random()
    if u < cfg.p_quantize:
        _, values = fsq_quantize(x, cfg.levels)
        return values
    y = T.tanh(x)
    if u < cfg.p_quantize + cfg.p_dither:
        amp = cfg.dither_amplitude
        noise = rng.uniform(-amp, amp, size=y.shape).astype(np.float32)
        return y + Tensor(noise)
    return y


@dataclass
class VQCodebook:
    """Learned nearest-neighbor codebook with EMA updates.

    Entries are not gradient parameters; they move by exponential moving
    averages of assigned encoder latents, with dead entries reseeded from the
    batch after `reseed_after` unused steps.
    """

    entries: np.ndarray
    ema_decay: float = 0.99
    reseed_after: int = 200
    usage: np.ndarray = field(init=False)
    unused_steps: np.ndarray = field(init=False)
    _ema_counts: np.ndarray = field(init=False)
    _ema_sums: np.ndarray = field(init=False)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float32)
        if self.entries.ndim != 2 or self.entries.shape[0] < 1:
            raise ValueError("codebook must be a non-empty [K, dim] matrix")
        k = self.entries.shape[0]
        self.usage = np.zeros(k, dtype=np.int64)
        self.unused_steps = np.zeros(k, dtype=np.int64)
        self._ema_counts = np.ones(k, dtype=np.float64)
        self._ema_sums = self.entries.astype(np.float64).copy()

    @classmethod
    def random_init(cls, size: int, dim: int, rng: np.random.Generator, **kw) -> "VQCodebook":
        return cls(entries=rng.normal(0.0, 0.5, size=(size, dim)).astype(np.float32), **kw)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def nearest(self, z: np.ndarray) -> np.ndarray:
        """Nearest entry index per row; ties break toward the lowest index."""
        z = np.atleast_2d(z)
        d = ((z[:, None, :] - self.entries[None]) ** 2).sum(-1)
        return d.argmin(axis=1)

    def ema_update(self, z_batch: np.ndarray, indices: np.ndarray, rng: np.random.Generator) -> None:
        z_batch = np.atleast_2d(z_batch).astype(np.float64)
        indices = np.atleast_1d(indices)
        counts = np.bincount(indices, minlength=self.size).astype(np.float64)
        sums = np.zeros_like(self._ema_sums)
        np.add.at(sums, indices, z_batch)
        self._ema_counts = self.ema_decay * self._ema_counts + (1 - self.ema_decay) * counts
        self._ema_sums = self.ema_decay * self._ema_sums + (1 - self.ema_decay) * sums
        used = counts > 0
        self.usage[used] += counts[used].astype(np.int64)
        self.unused_steps = np.where(used, 0, self.unused_steps + 1)
        denom = np.maximum(self._ema_counts, 1e-5)[:, None]
        self.entries = (self._ema_sums / denom).astype(np.float32)
        dead = self.unused_steps >= self.reseed_after
        if dead.any():
            picks = rng.integers(0, z_batch.shape[0], size=int(dead.sum()))
            self.entries[dead] = z_batch[picks].astype(np.float32)
            self._ema_sums[dead] = z_batch[picks]
            self._ema_counts[dead] = 1.0
            self.unused_steps[dead] = 0


def vq_quantize(
    z_e: Tensor,
    book: VQCodebook,
    training: bool = False,
    rng: np.random.Generator | None = None,
    p_apply: float = 0.5,
) -> tuple[int, Tensor, Tensor]:
    """Nearest-entry quantization with straight-through gradients.

    Returns (index, z_q, commit_loss) where commit = ||z_e - sg(z_q)||^2. In
    training, with probability 1 - p_apply the unquantized z_e passes forward
    and the commit loss is reported as 0.
    """
    if z_e.data.shape[-1] != book.dim:
        raise ValueError("latent dim does not match codebook")
    index = int(book.nearest(z_e.data.reshape(1, -1))[0])
    if training:
        if rng is None:
            raise ValueError("training mode needs an rng for the apply draw")
        if rng.random() >= p_apply:
            return index, z_e, Tensor(np.zeros((), dtype=z_e.data.dtype))
    entry = book.entries[index].astype(z_e.data.dtype)
    z_q = T.straight_through(z_e, entry)
    diff = z_e - Tensor(entry)
    commit = (diff * diff).sum()
    return index, z_q, commit


def bitrate(frame_rate_hz: float, semantic_k: int, acoustic_dims: int, acoustic_levels: int) -> float:
    """Bits per second of the token stream: rate * (log2 K + dims * log2 L)."""
    if frame_rate_hz <= 0 or semantic_k <= 0 or acoustic_dims < 0:
        raise ValueError("arguments must be positive")
    bits = math.log2(semantic_k)
    if acoustic_dims:
        bits += acoustic_dims * math.log2(acoustic_levels)
    return frame_rate_hz * bits


@dataclass(frozen=True)
class TokenFrame:
    """One 12.5 Hz frame: a semantic index plus per-dim acoustic indices.

    End-of-audio frames use semantic == vocabulary size and carry no
    acoustic indices.
    """

    semantic: int
    acoustic: tuple[int, ...] | None

    @classmethod
    def eoa(cls, semantic_k: int) -> "TokenFrame":
        return cls(semantic=semantic_k, acoustic=None)

    @property
    def is_eoa(self) -> bool:
        return self.acoustic is None

    def tokens(self) -> int:
        return 1 + (0 if self.is_eoa else len(self.acoustic))


def write_token_frames(path: str, frames: list[TokenFrame], acoustic_dims: int) -> None:
    """Fixed-size records: u16-LE semantic then `acoustic_dims` u8 indices.

    EOA rows pad the acoustic bytes with zeros.
    """
    with open(path, "wb") as f:
        for fr in frames:
            f.write(struct.pack("<H", fr.semantic))
            if fr.is_eoa:
                f.write(bytes(acoustic_dims))
            else:
                if len(fr.acoustic) != acoustic_dims:
                    raise ValueError("frame has wrong acoustic dimensionality")
                f.write(bytes(int(a) for a in fr.acoustic))


def read_token_frames(path: str, acoustic_dims: int, semantic_k: int) -> list[TokenFrame]:
    record = 2 + acoustic_dims
    raw = open(path, "rb").read()
    if len(raw) % record:
        raise ValueError("token file length is not a whole number of records")
    frames = []
    for off in range(0, len(raw), record):
        sem = struct.unpack_from("<H", raw, off)[0]
        if sem == semantic_k:
            frames.append(TokenFrame.eoa(semantic_k))
        else:
            acoustic = tuple(raw[off + 2 : off + record])
            frames.append(TokenFrame(semantic=sem, acoustic=acoustic))
    return frames
