"""Toy autoregressive decoder over audio frames and text tokens: sequence
assembly with special tokens, summed per-codebook frame embeddings, the
semantic cross-entropy head with end-of-audio, VAD-weighted loss masking,
and token generation driven by the flow-matching acoustic head.

Text is byte-level (256 symbols); <next> and <repeat> live in a separate
trainable table so the byte table can stay frozen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import tensor as T
from .numerics import nn
from .numerics.tensor import Tensor
from .quantize import TokenFrame, fsq_values_of
from . import flowmatch

log = logging.getLogger(__name__)

NEXT = 0
REPEAT = 1

MAX_FRAMES = 2250  # 180 s at 12.5 Hz
MIN_PROMPT_FRAMES = 13  # 1 s at 12.5 Hz

zero_weight_warnings = 0


@dataclass
class BackboneConfig:
    width: int = 64
    layers: int = 2
    n_heads: int = 2
    text_vocab: int = 256
    semantic_vocab: int = 64  # K; the semantic head adds one EOA class
    acoustic_dims: int = 4
    acoustic_levels: int = 21
    max_positions: int = 640
    freeze_text_embeddings: bool = True
    vad_silence_weight: float = 0.2
    vad_long_silence_sec: float = 3.0
    frame_rate: float = 12.5
    temperature: float = 0.7
    top_k: int = 50
    max_frames: int = 256
    prompt_best_range_sec: tuple[float, float] = (3.0, 25.0)

    @property
    def eoa_id(self) -> int:
        return self.semantic_vocab


@dataclass
class TrainingSample:
    """(voice reference, transcript, target) plus a per-target-frame VAD mask.

    Duration contracts (reference >= 1 s, both sides <= 180 s) are enforced by
    the dataset builder; assembly accepts any lengths so layouts stay
    testable.
    """

    a1: list[TokenFrame]
    t2: bytes
    a2: list[TokenFrame]
    vad_mask: np.ndarray  # bool per a2 frame, True = speech

    def __post_init__(self):
        self.vad_mask = np.asarray(self.vad_mask, dtype=bool)
        if len(self.vad_mask) != len(self.a2):
            raise ValueError("vad_mask must cover every target frame")
        if len(self.a1) > MAX_FRAMES or len(self.a2) > MAX_FRAMES:
            raise ValueError(f"audio segments must stay within {MAX_FRAMES} frames")

    def check_durations(self) -> None:
        if len(self.a1) < MIN_PROMPT_FRAMES:
            raise ValueError(f"voice reference shorter than {MIN_PROMPT_FRAMES} frames")


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.semantic_embed = nn.Embedding(cfg.semantic_vocab, cfg.width, rng)
        # one lookup table per acoustic codebook, stored flat [dims*levels, width]
        self.acoustic_embed = nn.Embedding(cfg.acoustic_dims * cfg.acoustic_levels, cfg.width, rng)
        self.text_embed = nn.Embedding(cfg.text_vocab, cfg.width, rng)
        if cfg.freeze_text_embeddings:
            self.text_embed.table.requires_grad = False
        self.special_embed = nn.Embedding(2, cfg.width, rng)
        self.pos_embed = nn.Embedding(cfg.max_positions, cfg.width, rng)
        self.stack = nn.TransformerStack(cfg.layers, cfg.width, cfg.n_heads, rng, causal=True)
        self.final_norm = nn.LayerNorm(cfg.width)
        self.semantic_head = nn.Linear(cfg.width, cfg.semantic_vocab + 1, rng)

    def embed_frame(self, frame: TokenFrame) -> Tensor:
        cfg = self.cfg
        if frame.is_eoa:
            raise ValueError("EOA frames are targets, never inputs")
        if not (0 <= frame.semantic < cfg.semantic_vocab):
            raise ValueError(f"semantic index {frame.semantic} out of vocabulary")
        if len(frame.acoustic) != cfg.acoustic_dims:
            raise ValueError("acoustic index count mismatch")
        flat = [d * cfg.acoustic_levels + int(a) for d, a in enumerate(frame.acoustic)]
        if any(a < 0 or a >= cfg.acoustic_levels for a in frame.acoustic):
            raise ValueError("acoustic index out of vocabulary")
        emb = self.semantic_embed(np.asarray([frame.semantic]))
        emb = emb + self.acoustic_embed(np.asarray(flat)).sum(axis=0, keepdims=True)
        return emb  # [1, width]

    def embed_sequence(self, frames_and_tokens: list) -> Tensor:
        """List entries are TokenFrame, ('text', byte) or ('special', id)."""
        parts = []
        for item in frames_and_tokens:
            if isinstance(item, TokenFrame):
                parts.append(self.embed_frame(item))
            else:
                kind, idx = item
                table = self.text_embed if kind == "text" else self.special_embed
                parts.append(table(np.asarray([idx])))
        return T.concat(parts, axis=0)  # [S, width]

    def hidden_states(self, embedded: Tensor) -> Tensor:
        """[S, width] -> [S, width] causal hidden states."""
        s = embedded.shape[0]
        if s > self.cfg.max_positions:
            raise ValueError(f"sequence length {s} exceeds max positions")
        x = embedded + self.pos_embed(np.arange(s))
        x = self.stack(x.reshape(1, s, self.cfg.width))
        return self.final_norm(x).reshape(s, self.cfg.width)

    def logits(self, hidden: Tensor) -> Tensor:
        return self.semantic_head(hidden)


@dataclass
class AssembledSample:
    """Embedded training sequence plus aligned target/mask arrays.

    targets[p] is the semantic class the position p must predict (-1 where
    unmasked); weights[p] is the VAD-derived loss weight; fm_positions lists
    the positions whose hidden states condition the acoustic head, and
    fm_targets the matching acoustic embeddings (FSQ center values).
    """

    embedded: Tensor
    targets: np.ndarray
    weights: np.ndarray
    fm_positions: np.ndarray
    fm_targets: np.ndarray
    fm_weights: np.ndarray


def vad_weights(vad_mask: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """1.0 on speech frames, the configured low weight on silence, and 0 on
    silence runs longer than the long-silence threshold."""
    vad_mask = np.asarray(vad_mask, dtype=bool)
    w = np.where(vad_mask, 1.0, cfg.vad_silence_weight).astype(np.float32)
    limit = cfg.vad_long_silence_sec * cfg.frame_rate
    i = 0
    n = len(vad_mask)
    while i < n:
        if not vad_mask[i]:
            j = i
            while j < n and not vad_mask[j]:
                j += 1
            if (j - i) > limit:
                w[i:j] = 0.0
            i = j
        else:
            i += 1
    return w


def assemble_sequence(model: Backbone, sample: TrainingSample) -> AssembledSample:
    """Layout [A1][<next>][T2][<repeat>][A2]; loss lands only on positions
    whose target is an A2 frame or the EOA."""
    cfg = model.cfg
    items: list = list(sample.a1)
    items.append(("special", NEXT))
    items.extend(("text", b) for b in sample.t2)
    items.append(("special", REPEAT))
    items.extend(sample.a2)
    embedded = model.embed_sequence(items)

    s = len(items)
    n2 = len(sample.a2)
    repeat_pos = len(sample.a1) + 1 + len(sample.t2) + 1 - 1
    targets = np.full(s, -1, dtype=np.int64)
    weights = np.zeros(s, dtype=np.float32)
    frame_w = vad_weights(sample.vad_mask, cfg)
    for i in range(n2):
        pos = repeat_pos + i  # position predicting a2[i]
        targets[pos] = sample.a2[i].semantic
        weights[pos] = frame_w[i]
    targets[s - 1] = cfg.eoa_id  # EOA target, always weight 1
    weights[s - 1] = 1.0

    fm_positions = np.asarray([repeat_pos + i for i in range(n2)], dtype=np.int64)
    fm_targets = np.stack(
        [fsq_values_of(np.asarray(f.acoustic), cfg.acoustic_levels) for f in sample.a2]
    ).astype(np.float32) if n2 else np.zeros((0, cfg.acoustic_dims), dtype=np.float32)
    return AssembledSample(
        embedded=embedded,
        targets=targets,
        weights=weights,
        fm_positions=fm_positions,
        fm_targets=fm_targets,
        fm_weights=frame_w,
    )


def semantic_loss(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean cross-entropy over masked positions; EOA is a regular
    class. All-zero weights define the loss as 0 (counted as a warning)."""
    global zero_weight_warnings
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float32)
    if (weights < 0).any():
        raise ValueError("weights must be non-negative")
    total = float(weights.sum())
    if total == 0.0:
        zero_weight_warnings += 1
        log.warning("semantic_loss saw all-zero weights")
        return Tensor(np.zeros((), dtype=np.float32))
    lp = T.log_softmax(logits, axis=-1)
    picked = T.gather_last(lp, np.maximum(targets, 0))
    ce = -picked * Tensor(weights)
    return ce.sum() * (1.0 / total)


@dataclass
class TtsModel(nn.Module):
    """Backbone plus the flow-matching acoustic head, trained jointly."""

    backbone: Backbone
    fm_head: flowmatch.FlowMatchHead

    @classmethod
    def build(cls, cfg: BackboneConfig, rng: np.random.Generator) -> "TtsModel":
        fm_cfg = flowmatch.FlowMatchConfig(
            x_dim=cfg.acoustic_dims,
            cond_dim=cfg.width,
            width=cfg.width,
            fsq_levels=cfg.acoustic_levels,
        )
        return cls(backbone=Backbone(cfg, rng), fm_head=flowmatch.FlowMatchHead(fm_cfg, rng))

    @property
    def cfg(self) -> BackboneConfig:
        return self.backbone.cfg


def tts_loss(
    model: TtsModel, sample: TrainingSample, rng: np.random.Generator
) -> tuple[Tensor, dict[str, float]]:
    """Joint objective: VAD-weighted semantic cross-entropy plus the
    flow-matching loss on the target frames' acoustic embeddings."""
    asm = assemble_sequence(model.backbone, sample)
    hidden = model.backbone.hidden_states(asm.embedded)
    logits = model.backbone.logits(hidden)
    sem = semantic_loss(logits, asm.targets, asm.weights)
    if len(asm.fm_positions):
        h = hidden[asm.fm_positions]
        path = flowmatch.draw_path_samples(asm.fm_targets, rng)
        ac = flowmatch.fm_loss(model.fm_head, path, h, rng, weights=asm.fm_weights)
    else:
        ac = Tensor(np.zeros((), dtype=np.float32))
    total = sem + ac
    return total, {"semantic": float(sem.item()), "acoustic": float(ac.item()), "total": float(total.item())}


def sample_token(logits: np.ndarray, temperature: float, top_k: int, rng: np.random.Generator) -> int:
    if temperature <= 0:
        return int(logits.argmax())
    scaled = logits.astype(np.float64) / temperature
    if top_k and top_k < len(scaled):
        cutoff = np.sort(scaled)[-top_k]
        scaled = np.where(scaled >= cutoff, scaled, -np.inf)
    scaled -= scaled.max()
    p = np.exp(scaled)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


@dataclass
class GenerateResult:
    frames: list[TokenFrame]
    steps: int
    eoa_terminated: bool
    truncated: bool = False


def generate(
    model: TtsModel,
    voice_prompt: list[TokenFrame],
    text: bytes,
    rng: np.random.Generator,
    sampler: flowmatch.SamplerConfig | None = None,
    temperature: float | None = None,
    top_k: int | None = None,
    max_frames: int | None = None,
    acoustic_fn=None,
) -> GenerateResult:
    """Autoregressive decode: sample a semantic token per step, stop on EOA,
    otherwise run the acoustic head on the hidden state, discretize, and feed
    the completed frame back in.

    acoustic_fn overrides the flow-matching call (stub hook for tests);
    it maps a [width] hidden state to [acoustic_dims] float values.
    """
    cfg = model.cfg
    sampler = sampler or flowmatch.SamplerConfig()
    temperature = cfg.temperature if temperature is None else temperature
    top_k = cfg.top_k if top_k is None else top_k
    max_frames = cfg.max_frames if max_frames is None else max_frames

    dur = len(voice_prompt) / cfg.frame_rate
    lo, hi = cfg.prompt_best_range_sec
    if not (lo <= dur <= hi):
        log.warning("voice prompt %.2fs outside the best range %.0f-%.0fs", dur, lo, hi)

    backbone = model.backbone
    prompt_items: list = list(voice_prompt)
    prompt_items.append(("special", NEXT))
    prompt_items.extend(("text", b) for b in text)
    prompt_items.append(("special", REPEAT))

    with T.no_grad():
        embedded = backbone.embed_sequence(prompt_items).data
        caches = backbone.stack.make_caches()
        hidden = None
        for pos in range(embedded.shape[0]):
            x = embedded[pos : pos + 1] + backbone.pos_embed.table.data[pos : pos + 1]
            hidden = backbone.stack.step(x, caches)
        pos = embedded.shape[0]

        frames: list[TokenFrame] = []
        steps = 0
        eoa = False
        while len(frames) < max_frames:
            h_last = _final_norm_np(backbone, hidden)
            logits = h_last @ backbone.semantic_head.weight.data + backbone.semantic_head.bias.data
            tok = sample_token(logits[0], temperature, top_k, rng)
            steps += 1
            if tok == cfg.eoa_id:
                eoa = True
                break
            if acoustic_fn is not None:
                values = np.asarray(acoustic_fn(h_last[0]), dtype=np.float32)
                from .quantize import fsq_indices_of

                idx = fsq_indices_of(np.clip(values, -1.0, 1.0), cfg.acoustic_levels)
            else:
                _, idx = flowmatch.sample(model.fm_head, Tensor(h_last), sampler, rng)
                idx = idx[0]
            frame = TokenFrame(semantic=tok, acoustic=tuple(int(i) for i in idx))
            frames.append(frame)
            emb = backbone.embed_frame(frame).data + backbone.pos_embed.table.data[pos : pos + 1]
            hidden = backbone.stack.step(emb, caches)
            pos += 1

        truncated = not eoa
        if truncated:
            log.warning("generation hit the %d frame cap before EOA", max_frames)
    return GenerateResult(frames=frames, steps=steps, eoa_terminated=eoa, truncated=truncated)


def _final_norm_np(backbone: Backbone, hidden: np.ndarray) -> np.ndarray:
    norm = backbone.final_norm
    mu = hidden.mean(-1, keepdims=True)
    c = hidden - mu
    var = (c * c).mean(-1, keepdims=True)
    return c / np.sqrt(var + norm.eps) * norm.gamma.data + norm.beta.data


class TtsTrainer:
    """Adam over backbone + acoustic head with JSONL loss logging."""

    def __init__(self, model: TtsModel, rng: np.random.Generator, lr: float = 1e-3, log_path: str | None = None):
        self.model = model
        self.rng = rng
        self.opt = nn.Adam(model.backbone.param_tensors() + model.fm_head.param_tensors(), lr=lr)
        self.step_count = 0
        self._log_file = open(log_path, "a") if log_path else None

    def train_step(self, samples: list[TrainingSample]) -> dict[str, float]:
        agg: dict[str, float] = {}
        self.opt.zero_grad()
        for sample in samples:
            loss, breakdown = tts_loss(self.model, sample, self.rng)
            T.backward(loss * (1.0 / len(samples)))
            for k, v in breakdown.items():
                agg[k] = agg.get(k, 0.0) + v / len(samples)
        self.opt.step()
        if self._log_file:
            import json

            for k, v in agg.items():
                self._log_file.write(json.dumps({"step": self.step_count, "loss_name": k, "value": v}) + "\n")
            self._log_file.flush()
        self.step_count += 1
        return agg

    def close(self):
        if self._log_file:
            self._log_file.close()
