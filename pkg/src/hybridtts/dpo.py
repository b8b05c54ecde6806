"""Hybrid preference optimization: standard DPO over semantic-token
log-likelihoods plus a flow-matching preference objective over acoustic
velocities with per-position time sampling, and a rejection-sampling pair
builder with pluggable scorers.

Log-likelihoods and velocity-error sums run over response positions without
length normalization (normalizing by winner length destabilizes training).
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import tensor as T
from .numerics import nn
from .numerics.tensor import Tensor
from .quantize import TokenFrame, read_token_frames, write_token_frames
from .backbone import TrainingSample, TtsModel, assemble_sequence, generate
from . import flowmatch

log = logging.getLogger(__name__)


@dataclass
class DPOConfig:
    beta_semantic: float = 0.1
    beta_acoustic: float = 0.5
    learning_rate: float = 8e-8  # paper-scale stability default; toys override
    semantic_weight: float = 1.0
    flow_weight: float = 1.0
    mix_pretraining: bool = False
    mixture_ratio: float = 0.5
    epochs: int = 1
    sum_logprobs: bool = True  # sum over positions (no length normalization)

    def __post_init__(self):
        if self.beta_semantic <= 0 or self.beta_acoustic <= 0:
            raise ValueError("beta values must be positive")


@dataclass
class PreferencePair:
    """Winner and loser generations conditioned on one shared prompt."""

    prompt_frames: list[TokenFrame]
    prompt_text: bytes
    winner: list[TokenFrame]
    loser: list[TokenFrame]
    pair_id: str = ""

    def __post_init__(self):
        if not self.winner or not self.loser:
            raise ValueError("winner and loser must be non-empty")


@dataclass
class NoisePlan:
    """Per-position t and noise, drawn once and reused for the policy and
    reference passes so both models see identical paths."""

    t: np.ndarray  # [P]
    noise: np.ndarray  # [P, acoustic_dims]

    @classmethod
    def draw(cls, rng: np.random.Generator, positions: int, dims: int) -> "NoisePlan":
        return cls(
            t=rng.uniform(0.0, 1.0, size=positions).astype(np.float32),
            noise=rng.standard_normal((positions, dims)).astype(np.float32),
        )

    @classmethod
    def for_pair(cls, rng: np.random.Generator, pair: PreferencePair, dims: int) -> "NoisePlan":
        return cls.draw(rng, max(len(pair.winner), len(pair.loser)), dims)


def softplus(x: Tensor) -> Tensor:
    # stable log(1 + exp(x))
    return T.relu(x) + ((-x.abs()).exp() + 1.0).log()


def _response_forward(model: TtsModel, pair: PreferencePair, response: list[TokenFrame]):
    """Teacher-forced pass; returns (hidden, assembled) for a response."""
    sample = TrainingSample(
        a1=pair.prompt_frames,
        t2=pair.prompt_text,
        a2=response,
        vad_mask=np.ones(len(response), dtype=bool),
    )
    asm = assemble_sequence(model.backbone, sample)
    hidden = model.backbone.hidden_states(asm.embedded)
    return hidden, asm


def sequence_logprob(model: TtsModel, pair: PreferencePair, response: list[TokenFrame], sum_positions: bool = True) -> Tensor:
    """Log-likelihood of the response's semantic tokens (EOA included),
    summed over positions by default."""
    hidden, asm = _response_forward(model, pair, response)
    logits = model.backbone.logits(hidden)
    mask = asm.targets >= 0
    lp = T.log_softmax(logits, axis=-1)
    picked = T.gather_last(lp, np.maximum(asm.targets, 0))
    picked = picked * Tensor(mask.astype(np.float32))
    total = picked.sum()
    if sum_positions:
        return total
    return total * (1.0 / float(mask.sum()))


def semantic_dpo_loss(
    policy: TtsModel, reference: TtsModel, pair: PreferencePair, beta: float, sum_positions: bool = True
) -> tuple[Tensor, float]:
    """-log sigmoid(beta * ((lp_w - lp_l) - (lp_w_ref - lp_l_ref))).

    Returns (loss, margin) where margin is the inner sigmoid argument.
    """
    lp_w = sequence_logprob(policy, pair, pair.winner, sum_positions)
    lp_l = sequence_logprob(policy, pair, pair.loser, sum_positions)
    with T.no_grad():
        ref_w = sequence_logprob(reference, pair, pair.winner, sum_positions).item()
        ref_l = sequence_logprob(reference, pair, pair.loser, sum_positions).item()
    margin = beta * ((lp_w - lp_l) - (ref_w - ref_l))
    loss = softplus(-margin)
    return loss, float(margin.item())


def flow_dpo_delta(model: TtsModel, pair: PreferencePair, plan: NoisePlan) -> Tensor:
    """Velocity-error gap: sum_i ||v(x_w_i,t_i) - u_w_i||^2 over the winner
    minus the same sum over the loser; no length normalization."""
    if len(plan.t) < max(len(pair.winner), len(pair.loser)):
        raise ValueError("noise plan shorter than the longest response")

    def seq_error(response: list[TokenFrame]) -> Tensor:
        hidden, asm = _response_forward(model, pair, response)
        n = len(response)
        h = hidden[asm.fm_positions]
        x0 = asm.fm_targets  # [n, dims] FSQ center values
        t = plan.t[:n]
        x1 = plan.noise[:n]
        x_t = (1.0 - t[:, None]) * x0 + t[:, None] * x1
        u = x1 - x0
        v = model.fm_head(Tensor(x_t.astype(np.float32)), t, h)
        err = (v - Tensor(u.astype(np.float32))) ** 2.0
        return err.sum()

    return seq_error(pair.winner) - seq_error(pair.loser)


def flow_dpo_loss(
    policy: TtsModel, reference: TtsModel, pair: PreferencePair, plan: NoisePlan, beta: float
) -> tuple[Tensor, float]:
    """-log sigmoid(-beta * (delta_policy - delta_reference)); the same plan
    feeds both models."""
    delta_policy = flow_dpo_delta(policy, pair, plan)
    with T.no_grad():
        delta_ref = flow_dpo_delta(reference, pair, plan).item()
    margin = -beta * (delta_policy - delta_ref)
    loss = softplus(-margin)
    return loss, float(margin.item())


# -- rejection sampling ---------------------------------------------------------


@dataclass
class GeneratedSample:
    sample_id: str
    frames: list[TokenFrame]
    audio: np.ndarray | None = None


@dataclass
class Scorer:
    """Pluggable sample scorer with declared polarity and weight.

    min_raw, when set, gates pairs: prompts whose best sample scores worse
    than min_raw yield no pair.
    """

    name: str
    fn: "callable"
    higher_is_better: bool = True
    weight: float = 1.0
    min_raw: float | None = None

    def __call__(self, sample: GeneratedSample) -> float:
        return float(self.fn(sample))

    def passes_gate(self, raw: float) -> bool:
        if self.min_raw is None:
            return True
        return raw >= self.min_raw if self.higher_is_better else raw <= self.min_raw


def rms_db(x: np.ndarray) -> float:
    return 20.0 * np.log10(np.sqrt(np.mean(np.square(x, dtype=np.float64))) + 1e-10)


def loudness_consistency(sample: GeneratedSample) -> float:
    """Negative |dB gap| between the first and last quarter of the audio;
    constant-loudness audio scores 0 (highest)."""
    if sample.audio is None or len(sample.audio) < 8:
        raise ValueError("loudness scorer needs decoded audio")
    q = len(sample.audio) // 4
    return -abs(rms_db(sample.audio[-q:]) - rms_db(sample.audio[:q]))


def duration_plausibility(expected_frames: float):
    def score(sample: GeneratedSample) -> float:
        return -abs(len(sample.frames) - expected_frames)

    return score


def repetition_penalty(sample: GeneratedSample) -> float:
    """Fraction of consecutive repeated semantic tokens (lower is better)."""
    sem = [f.semantic for f in sample.frames if not f.is_eoa]
    if len(sem) < 2:
        return 0.0
    rep = sum(1 for a, b in zip(sem, sem[1:]) if a == b)
    return rep / (len(sem) - 1)


def external_score_file(path: str, name: str, **kw) -> Scorer:
    """Scorer backed by a JSON sidecar {sample_id: score} (WER/MOS slots)."""
    table = json.load(open(path))

    def fn(sample: GeneratedSample) -> float:
        return float(table[sample.sample_id])

    return Scorer(name=name, fn=fn, **kw)


def _rank_normalize(raw: list[float], higher_is_better: bool) -> np.ndarray:
    order = np.argsort(np.asarray(raw))
    ranks = np.empty(len(raw))
    ranks[order] = np.arange(len(raw))
    if len(raw) > 1:
        ranks = ranks / (len(raw) - 1)
    if not higher_is_better:
        ranks = 1.0 - ranks
    return ranks


def build_pairs(
    prompts: list[tuple[list[TokenFrame], bytes]],
    model: TtsModel,
    num_samples: int,
    scorers: list[Scorer],
    rng: np.random.Generator,
    decode_fn=None,
    **generate_kw,
) -> list[PreferencePair]:
    """Generate num_samples per prompt, rank by weighted rank-normalized
    scores, and pair best against worst; failed scorers drop the sample, and
    gated prompts yield no pair."""
    if num_samples < 2:
        raise ValueError("need at least 2 samples per prompt")
    pairs = []
    for pi, (frames, text) in enumerate(prompts):
        samples: list[GeneratedSample] = []
        for si in range(num_samples):
            result = generate(model, frames, text, rng, **generate_kw)
            if not result.frames:
                continue
            audio = decode_fn(result.frames) if decode_fn else None
            samples.append(GeneratedSample(f"p{pi}s{si}", result.frames, audio))

        raw_scores: dict[str, list[float]] = {}
        kept = []
        for s in samples:
            row = {}
            try:
                for scorer in scorers:
                    row[scorer.name] = scorer(s)
            except Exception as exc:  # scorer failure excludes the sample
                log.warning("scorer failed on %s: %s", s.sample_id, exc)
                continue
            kept.append(s)
            for k, v in row.items():
                raw_scores.setdefault(k, []).append(v)
        if len(kept) < 2:
            continue

        combined = np.zeros(len(kept))
        total_w = sum(s.weight for s in scorers) or 1.0
        for scorer in scorers:
            combined += scorer.weight * _rank_normalize(raw_scores[scorer.name], scorer.higher_is_better)
        combined /= total_w
        best, worst = int(np.argmax(combined)), int(np.argmin(combined))
        if best == worst:
            continue
        gated = any(
            not scorer.passes_gate(raw_scores[scorer.name][best]) for scorer in scorers
        )
        if gated:
            continue
        pairs.append(
            PreferencePair(
                prompt_frames=frames,
                prompt_text=text,
                winner=kept[best].frames,
                loser=kept[worst].frames,
                pair_id=f"pair{pi}",
            )
        )
    return pairs


# -- training -------------------------------------------------------------------


def make_reference(policy: TtsModel) -> TtsModel:
    """Frozen deep copy of the policy."""
    ref = copy.deepcopy(policy)
    for _, p in ref.parameters():
        p.requires_grad = False
        p.grad = None
    return ref


def dpo_pair_loss(
    policy: TtsModel,
    reference: TtsModel,
    pair: PreferencePair,
    plan: NoisePlan,
    cfg: DPOConfig,
) -> tuple[Tensor, dict[str, float]]:
    sem_loss, sem_margin = semantic_dpo_loss(policy, reference, pair, cfg.beta_semantic, cfg.sum_logprobs)
    fl_loss, fl_margin = flow_dpo_loss(policy, reference, pair, plan, cfg.beta_acoustic)
    total = cfg.semantic_weight * sem_loss + cfg.flow_weight * fl_loss
    return total, {
        "semantic_dpo": float(sem_loss.item()),
        "flow_dpo": float(fl_loss.item()),
        "margin": sem_margin + fl_margin,
        "total_dpo": float(total.item()),
    }


def dpo_train_step(
    policy: TtsModel,
    reference: TtsModel,
    batch: list[tuple[PreferencePair, NoisePlan]],
    cfg: DPOConfig,
    opt: nn.Adam,
    rng: np.random.Generator,
    pretrain_samples: list[TrainingSample] | None = None,
) -> dict[str, float]:
    """One optimizer step on the summed pair losses, optionally mixed with
    the pretraining objective; the reference stays frozen."""
    from .backbone import tts_loss

    opt.zero_grad()
    agg: dict[str, float] = {}
    n = len(batch)
    for pair, plan in batch:
        loss, stats = dpo_pair_loss(policy, reference, pair, plan, cfg)
        T.backward(loss * (1.0 / n))
        for k, v in stats.items():
            agg[k] = agg.get(k, 0.0) + v / n
    if cfg.mix_pretraining and pretrain_samples:
        for sample in pretrain_samples:
            loss, stats = tts_loss(policy, sample, rng)
            T.backward(loss * (cfg.mixture_ratio / len(pretrain_samples)))
            agg["pretrain"] = agg.get("pretrain", 0.0) + stats["total"] / len(pretrain_samples)
    opt.step()
    return agg


# -- pair dataset I/O -------------------------------------------------------------


def save_pairs(path: str, pairs: list[PreferencePair], acoustic_dims: int) -> None:
    """JSON-lines records referencing token-dump files stored alongside."""
    import os

    root = os.path.dirname(os.path.abspath(path))
    os.makedirs(root, exist_ok=True)
    with open(path, "w") as f:
        for i, pair in enumerate(pairs):
            rec = {"pair_id": pair.pair_id or f"pair{i}", "prompt_text": pair.prompt_text.decode("utf-8", "replace")}
            for kind, frames in (("prompt", pair.prompt_frames), ("winner", pair.winner), ("loser", pair.loser)):
                rel = f"{rec['pair_id']}.{kind}.tokens"
                write_token_frames(os.path.join(root, rel), frames, acoustic_dims)
                rec[f"{kind}_tokens"] = rel
            f.write(json.dumps(rec) + "\n")


def load_pairs(path: str, acoustic_dims: int, semantic_k: int) -> list[PreferencePair]:
    import os

    root = os.path.dirname(os.path.abspath(path))
    pairs = []
    for line in open(path):
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        read = lambda key: read_token_frames(os.path.join(root, rec[key]), acoustic_dims, semantic_k)
        pairs.append(
            PreferencePair(
                prompt_frames=read("prompt_tokens"),
                prompt_text=rec["prompt_text"].encode("utf-8"),
                winner=read("winner_tokens"),
                loser=read("loser_tokens"),
                pair_id=rec["pair_id"],
            )
        )
    return pairs
