"""Patchified convolutional-transformer waveform autoencoder with a split
VQ/FSQ bottleneck, the multi-resolution STFT discriminator, the combined
training objective, and reconstruction metrics.

Layout convention: waveforms are 1-D float tensors; internal sequences are
[batch=1, frames, channels].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import tensor as T
from .numerics import nn
from .numerics.tensor import Tensor
from .numerics.signal import stft_magnitude, log_mel
from .quantize import (
    FSQConfig,
    TokenFrame,
    VQCodebook,
    fsq_indices_of,
    fsq_quantize,
    fsq_train_forward,
    fsq_values_of,
)

DISC_FFT_SIZES = (2296, 1418, 876, 542, 334, 206, 126, 76)


@dataclass
class CodecConfig:
    sample_rate: int = 24000
    patch_size: int = 240
    embed_dim: int = 1024
    semantic_dim: int = 256
    acoustic_dim: int = 36
    input_proj_kernel: int = 7
    transformer_layers: tuple[int, ...] = (2, 2, 2, 2)
    windows: tuple[int, ...] = (16, 8, 4, 2)
    conv_kernels: tuple[int, ...] = (4, 4, 4, 3)
    conv_strides: tuple[int, ...] = (2, 2, 2, 1)
    layerscale_init: float = 0.01
    qk_norm_eps: float = 1e-6
    ffn_mult: int = 4
    vq_codebook_size: int = 8192
    fsq_levels: int = 21
    distill_dim: int = 32
    disc_fft_sizes: tuple[int, ...] = DISC_FFT_SIZES
    disc_channels: int = 256
    disc_layers: int = 4
    # None shares the discriminator resolutions for the STFT loss
    stft_loss_fft_sizes: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.semantic_dim + self.acoustic_dim <= 0:
            raise ValueError("empty latent")
        ratio = int(np.prod(self.conv_strides))
        if ratio != self.downsample_ratio:
            raise ValueError("stride product must equal the frame-rate ratio")

    @property
    def latent_dim(self) -> int:
        return self.semantic_dim + self.acoustic_dim

    @property
    def downsample_ratio(self) -> int:
        return int(np.prod(self.conv_strides))

    @property
    def samples_per_latent_frame(self) -> int:
        return self.patch_size * self.downsample_ratio

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.samples_per_latent_frame

    @property
    def n_heads(self) -> int:
        return max(1, self.embed_dim // 64)

    @property
    def stft_sizes(self) -> tuple[int, ...]:
        return self.stft_loss_fft_sizes or self.disc_fft_sizes

    @classmethod
    def paper(cls) -> "CodecConfig":
        return cls()

    @classmethod
    def toy(cls) -> "CodecConfig":
        return cls(
            embed_dim=64,
            semantic_dim=16,
            acoustic_dim=4,
            vq_codebook_size=64,
            distill_dim=16,
            disc_channels=8,
            disc_layers=3,
        )


@dataclass
class LatentFrame:
    semantic: Tensor
    acoustic: Tensor


@dataclass
class LossWeights:
    alpha: float = 1.0  # feature matching
    beta: float = 1.0  # ASR distillation
    gamma_base: float = 0.9999  # reconstruction decay
    delta: float = 0.1  # VQ commitment

    def gamma(self, step: int) -> float:
        return self.gamma_base**step

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma_base, self.delta) < 0:
            raise ValueError("loss weights must be non-negative")


def patchify(wave: Tensor, patch_size: int = 240) -> Tensor:
    """[S] -> [S/patch, patch]; S must be a positive multiple of patch_size."""
    n = wave.shape[0]
    if n == 0:
        raise ValueError("empty waveform")
    if n % patch_size:
        raise ValueError(f"length {n} is not a multiple of patch size {patch_size}")
    return wave.reshape(n // patch_size, patch_size)


def unpatchify(frames: Tensor) -> Tensor:
    return frames.reshape(frames.shape[0] * frames.shape[1])


def pad_wave(wave: np.ndarray, multiple: int) -> np.ndarray:
    rem = len(wave) % multiple
    if rem == 0 and len(wave) > 0:
        return np.asarray(wave, dtype=np.float32)
    return np.pad(np.asarray(wave, dtype=np.float32), (0, multiple - rem if rem else multiple))


class CodecEncoder(nn.Module):
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.in_proj = nn.CausalConv1d(cfg.patch_size, cfg.embed_dim, cfg.input_proj_kernel, rng)
        self.blocks = []
        n_stages = len(cfg.conv_strides)
        for i in range(n_stages):
            stack = nn.TransformerStack(
                cfg.transformer_layers[i], cfg.embed_dim, cfg.n_heads, rng,
                causal=True, window=cfg.windows[i], use_alibi=True,
                qk_norm_eps=cfg.qk_norm_eps, layerscale_init=cfg.layerscale_init,
                ffn_mult=cfg.ffn_mult,
            )
            out_dim = cfg.latent_dim if i == n_stages - 1 else cfg.embed_dim
            conv = nn.CausalConv1d(cfg.embed_dim, out_dim, cfg.conv_kernels[i], rng, stride=cfg.conv_strides[i])
            self.blocks.append(stack)
            self.blocks.append(conv)

    def __call__(self, wave: Tensor) -> Tensor:
        x = patchify(wave, self.cfg.patch_size)
        x = x.reshape(1, *x.shape)
        x = self.in_proj(x)
        for block in self.blocks:
            x = block(x)
        return x  # [1, F, latent_dim]


class CodecDecoder(nn.Module):
    """Strict mirror of the encoder: latent projection, reversed windows with
    transposed convolutions for the strided stages, final patch projection."""

    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        self.cfg = cfg
        kernels = cfg.conv_kernels[::-1]
        strides = cfg.conv_strides[::-1]
        windows = cfg.windows[::-1]
        self.in_proj = nn.CausalConv1d(cfg.latent_dim, cfg.embed_dim, kernels[0], rng, stride=1)
        self.blocks = []
        for i in range(len(strides)):
            if strides[i] != 1:
                kernel = kernels[i] if kernels[i] > 1 else kernels[-1]
                self.blocks.append(
                    nn.CausalConvTranspose1d(cfg.embed_dim, cfg.embed_dim, kernel, strides[i], rng)
                )
            self.blocks.append(
                nn.TransformerStack(
                    cfg.transformer_layers[i], cfg.embed_dim, cfg.n_heads, rng,
                    causal=True, window=windows[i], use_alibi=True,
                    qk_norm_eps=cfg.qk_norm_eps, layerscale_init=cfg.layerscale_init,
                    ffn_mult=cfg.ffn_mult,
                )
            )
        self.out_proj = nn.CausalConv1d(cfg.embed_dim, cfg.patch_size, cfg.input_proj_kernel, rng)

    def __call__(self, latents: Tensor) -> Tensor:
        x = self.in_proj(latents)
        for block in self.blocks:
            x = block(x)
        x = self.out_proj(x)
        return unpatchify(x.reshape(x.shape[1], x.shape[2]))


class CodecModel(nn.Module):
    """Autoencoder plus quantizers and the distillation projector."""

    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = CodecEncoder(cfg, rng)
        self.decoder = CodecDecoder(cfg, rng)
        self.projector = nn.Linear(cfg.semantic_dim, cfg.distill_dim, rng)
        self.codebook = VQCodebook.random_init(cfg.vq_codebook_size, cfg.semantic_dim, rng)
        self.fsq = FSQConfig(num_dims=cfg.acoustic_dim, levels=cfg.fsq_levels)

    # -- continuous paths ---------------------------------------------------

    def encode(self, wave: Tensor | np.ndarray) -> Tensor:
        """Padded wave -> [1, F, latent_dim] pre-quantization latents."""
        wave = wave if isinstance(wave, Tensor) else Tensor(wave)
        return self.encoder(wave)

    def decode(self, latents: Tensor) -> Tensor:
        return self.decoder(latents)

    def split(self, latents: Tensor) -> tuple[Tensor, Tensor]:
        sem = latents[:, :, : self.cfg.semantic_dim]
        ac = latents[:, :, self.cfg.semantic_dim :]
        return sem, ac

    # -- token paths ----------------------------------------------------------

    def encode_to_tokens(self, wave: np.ndarray) -> list[TokenFrame]:
        padded = pad_wave(wave, self.cfg.samples_per_latent_frame)
        with T.no_grad():
            latents = self.encode(padded)
        sem, ac = self.split(latents)
        sem_np = sem.data[0]
        ac_np = ac.data[0]
        indices = self.codebook.nearest(sem_np)
        frames = []
        for f in range(sem_np.shape[0]):
            ac_idx = fsq_indices_of(np.tanh(ac_np[f].astype(np.float64)), self.cfg.fsq_levels)
            frames.append(TokenFrame(semantic=int(indices[f]), acoustic=tuple(int(i) for i in ac_idx)))
        return frames

    def decode_tokens(self, frames: list[TokenFrame]) -> np.ndarray:
        frames = [f for f in frames if not f.is_eoa]
        if not frames:
            return np.zeros(0, dtype=np.float32)
        for f in frames:
            if not (0 <= f.semantic < self.codebook.size):
                raise ValueError(f"semantic index {f.semantic} out of range")
            if any(a < 0 or a >= self.cfg.fsq_levels for a in f.acoustic):
                raise ValueError("acoustic index out of range")
        sem = np.stack([self.codebook.entries[f.semantic] for f in frames])
        ac = np.stack([fsq_values_of(np.asarray(f.acoustic), self.cfg.fsq_levels) for f in frames])
        latents = Tensor(np.concatenate([sem, ac], axis=1)[None])
        with T.no_grad():
            wave = self.decode(latents)
        return wave.data

    def reconstruct(self, wave: np.ndarray) -> np.ndarray:
        """encode -> quantize -> decode, trimmed back to the input length."""
        frames = self.encode_to_tokens(wave)
        out = self.decode_tokens(frames)
        return out[: len(wave)]


# -- discriminator -----------------------------------------------------------


class ResolutionDiscriminator(nn.Module):
    """Conv stack over one magnitude spectrogram; returns every layer's
    activations (last entry is the logit map)."""

    def __init__(self, fft_size: int, channels: int, n_layers: int, rng: np.random.Generator):
        self.fft_size = fft_size
        self.convs = []
        c_in = 1
        for _ in range(n_layers - 1):
            self.convs.append(nn.Conv2d(c_in, channels, rng, kernel=(3, 3), stride=(1, 2)))
            c_in = channels
        self.convs.append(nn.Conv2d(c_in, 1, rng, kernel=(3, 3), stride=(1, 1)))

    def __call__(self, wave: Tensor) -> list[Tensor]:
        spec = stft_magnitude(wave, self.fft_size)
        x = spec.magnitudes
        x = x.reshape(1, x.shape[0], x.shape[1], 1)
        acts = []
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = T.leaky_relu(x, 0.2)
            acts.append(x)
        return acts


class MultiResolutionDiscriminator(nn.Module):
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        self.discriminators = [
            ResolutionDiscriminator(f, cfg.disc_channels, cfg.disc_layers, rng)
            for f in cfg.disc_fft_sizes
        ]

    def __call__(self, wave: Tensor) -> list[list[Tensor]]:
        return [d(wave) for d in self.discriminators]


def feature_matching_loss(
    real_acts: list[list[Tensor]],
    fake_acts: list[list[Tensor]],
    per_element_mean: bool = True,
) -> Tensor:
    """Mean over discriminators and layers of the L1 gap between activation
    stacks; stands in for the usual adversarial generator term."""
    terms = []
    for real_stack, fake_stack in zip(real_acts, fake_acts):
        for r, f in zip(real_stack, fake_stack):
            gap = (r - f).abs()
            terms.append(gap.mean() if per_element_mean else gap.sum())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def discriminator_hinge_loss(real_acts, fake_acts) -> tuple[Tensor, Tensor]:
    """Hinge losses on logits: real max(0, 1 - D(x)), fake max(0, 1 + D(x̂))."""
    real_terms = [T.relu(1.0 - stack[-1]).mean() for stack in real_acts]
    fake_terms = [T.relu(1.0 + stack[-1]).mean() for stack in fake_acts]
    n = float(len(real_terms))
    real = real_terms[0]
    fake = fake_terms[0]
    for t in real_terms[1:]:
        real = real + t
    for t in fake_terms[1:]:
        fake = fake + t
    return real * (1.0 / n), fake * (1.0 / n)


# -- reconstruction metrics ---------------------------------------------------


def stft_distance(x: np.ndarray, y: np.ndarray, sizes: tuple[int, ...] = DISC_FFT_SIZES) -> float:
    """Mean absolute magnitude-STFT gap averaged over resolutions."""
    with T.no_grad():
        tx, ty = Tensor(x), Tensor(y)
        vals = [
            float((stft_magnitude(tx, s).magnitudes - stft_magnitude(ty, s).magnitudes).abs().mean().item())
            for s in sizes
        ]
    return float(np.mean(vals))


def mel_distance(x: np.ndarray, y: np.ndarray, sample_rate: int = 24000, n_mels: int = 80) -> float:
    """Mean absolute log-mel gap (80 bins)."""
    with T.no_grad():
        mx = log_mel(Tensor(x), sample_rate, n_mels=n_mels)
        my = log_mel(Tensor(y), sample_rate, n_mels=n_mels)
        return float((mx - my).abs().mean().item())


# -- training objective --------------------------------------------------------


@dataclass
class CodecBatch:
    """One training sample: padded wave plus optional distillation targets."""

    wave: np.ndarray
    align_matrix: np.ndarray | None = None  # [L, F] rows sum to 1
    hidden_targets: np.ndarray | None = None  # [L, distill_dim]


@dataclass
class CodecForward:
    reconstruction: Tensor
    semantic_q: Tensor
    acoustic_q: Tensor
    commit: Tensor
    vq_indices: np.ndarray | None
    vq_applied: bool


def codec_forward(model: CodecModel, wave: np.ndarray, training: bool, rng: np.random.Generator) -> CodecForward:
    """Encode, apply the stochastic bottleneck, decode."""
    latents = model.encode(wave)
    sem, ac = model.split(latents)
    f = sem.shape[1]
    sem_flat = sem.reshape(f, model.cfg.semantic_dim)

    vq_applied = (not training) or (rng.random() < 0.5)
    indices = model.codebook.nearest(sem_flat.data)
    if vq_applied:
        entries = model.codebook.entries[indices].astype(sem_flat.data.dtype)
        sem_q = T.straight_through(sem_flat, entries)
        diff = sem_flat - Tensor(entries)
        commit = (diff * diff).sum(axis=1).mean()
    else:
        sem_q = sem_flat
        commit = Tensor(np.zeros((), dtype=sem_flat.data.dtype))

    ac_flat = ac.reshape(f, model.cfg.acoustic_dim)
    if training:
        ac_q = fsq_train_forward(ac_flat, rng, model.fsq)
    else:
        _, ac_q = fsq_quantize(ac_flat, model.cfg.fsq_levels)

    latents_q = T.concat([sem_q, ac_q], axis=1).reshape(1, f, model.cfg.latent_dim)
    recon = model.decode(latents_q)
    return CodecForward(
        reconstruction=recon,
        semantic_q=sem_q,
        acoustic_q=ac_q,
        commit=commit,
        vq_indices=indices if vq_applied else None,
        vq_applied=vq_applied,
    )


def distill_loss_from_targets(model: CodecModel, sem_q: Tensor, batch: CodecBatch) -> Tensor:
    from .align import asr_distill_loss  # local import; align builds on codec types

    return asr_distill_loss(sem_q, batch.align_matrix, batch.hidden_targets, model.projector)


def codec_objective(
    model: CodecModel,
    disc: MultiResolutionDiscriminator,
    batch: CodecBatch,
    step: int,
    weights: LossWeights,
    rng: np.random.Generator,
    training: bool = True,
    per_element_mean: bool = True,
) -> tuple[Tensor, dict[str, float], CodecForward]:
    """Combined generator objective:
    alpha*feature + beta*asr + gamma^t*(l1 + stft) + delta*commit.

    The discriminator must be frozen for this pass (its params get gradients
    cleared by the trainer before its own update).
    """
    wave = Tensor(batch.wave)
    fwd = codec_forward(model, batch.wave, training, rng)
    recon = fwd.reconstruction

    l1 = (wave - recon).abs().mean()
    stft_terms = [
        (stft_magnitude(wave, s).magnitudes - stft_magnitude(recon, s).magnitudes).abs().mean()
        for s in model.cfg.stft_sizes
    ]
    stft = stft_terms[0]
    for t in stft_terms[1:]:
        stft = stft + t
    stft = stft * (1.0 / len(stft_terms))

    real_acts = disc(wave)
    fake_acts = disc(recon)
    feat = feature_matching_loss(real_acts, fake_acts, per_element_mean)

    if batch.align_matrix is not None and batch.hidden_targets is not None:
        asr = distill_loss_from_targets(model, fwd.semantic_q, batch)
    else:
        asr = Tensor(np.zeros((), dtype=np.float32))

    gamma = weights.gamma(step)
    total = (
        weights.alpha * feat
        + weights.beta * asr
        + gamma * (l1 + stft)
        + weights.delta * fwd.commit
    )
    breakdown = {
        "feature": float(feat.item()),
        "asr": float(asr.item()),
        "l1": float(l1.item()),
        "stft": float(stft.item()),
        "commit": float(fwd.commit.item()),
        "gamma": gamma,
        "total": float(total.item()),
    }
    return total, breakdown, fwd


class CodecTrainer:
    """Alternating generator/discriminator updates with JSONL loss logging."""

    def __init__(
        self,
        model: CodecModel,
        disc: MultiResolutionDiscriminator,
        rng: np.random.Generator,
        lr: float = 1e-3,
        weights: LossWeights | None = None,
        log_path: str | None = None,
    ):
        self.model = model
        self.disc = disc
        self.rng = rng
        self.weights = weights or LossWeights()
        self.g_opt = nn.Adam(model.param_tensors(), lr=lr)
        self.d_opt = nn.Adam(disc.param_tensors(), lr=lr)
        self.step_count = 0
        self.log_path = log_path
        self._log_file = open(log_path, "a") if log_path else None

    def _log(self, name: str, value: float) -> None:
        if self._log_file:
            self._log_file.write(json.dumps({"step": self.step_count, "loss_name": name, "value": value}) + "\n")
            self._log_file.flush()

    def g_step(self, batch: CodecBatch) -> dict[str, float]:
        total, breakdown, fwd = codec_objective(
            self.model, self.disc, batch, self.step_count, self.weights, self.rng
        )
        self.g_opt.zero_grad()
        self.d_opt.zero_grad()
        T.backward(total)
        for p in self.d_opt.params:  # discriminator frozen for this pass
            p.grad = None
        self.g_opt.step()
        if fwd.vq_applied and fwd.vq_indices is not None:
            sem, _ = self.model.split(self.model.encode(batch.wave).detach())
            self.model.codebook.ema_update(
                sem.data.reshape(-1, self.model.cfg.semantic_dim), fwd.vq_indices, self.rng
            )
        for k, v in breakdown.items():
            self._log(f"g/{k}", v)
        return breakdown

    def d_step(self, batch: CodecBatch) -> dict[str, float]:
        with T.no_grad():
            fake_wave = codec_forward(self.model, batch.wave, True, self.rng).reconstruction.data
        real_acts = self.disc(Tensor(batch.wave))
        fake_acts = self.disc(Tensor(fake_wave))
        real, fake = discriminator_hinge_loss(real_acts, fake_acts)
        total = real + fake
        self.d_opt.zero_grad()
        T.backward(total)
        self.d_opt.step()
        out = {"d_real": float(real.item()), "d_fake": float(fake.item())}
        for k, v in out.items():
            self._log(k, v)
        return out

    def train_step(self, batch: CodecBatch) -> dict[str, float]:
        d_losses = self.d_step(batch)
        g_losses = self.g_step(batch)
        self.step_count += 1
        return {**d_losses, **g_losses}

    def close(self):
        if self._log_file:
            self._log_file.close()


def synthetic_speech_wave(rng: np.random.Generator, seconds: float, sample_rate: int = 24000) -> np.ndarray:
    """Periodic toy 'speech': a few harmonics with slow amplitude modulation."""
    n = int(seconds * sample_rate)
    t = np.arange(n) / sample_rate
    f0 = float(rng.uniform(80, 260))
    wave = np.zeros(n, dtype=np.float32)
    for k in range(1, 4):
        wave += rng.uniform(0.1, 0.4) / k * np.sin(2 * np.pi * f0 * k * t + rng.uniform(0, 2 * np.pi))
    mod = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(1.0, 4.0) * t)
    return (wave * mod).astype(np.float32)
