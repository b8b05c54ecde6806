"""Tensor engine, autodiff, and shared signal primitives."""

from .tensor import (
    Tensor,
    backward,
    no_grad,
    grad_enabled,
    add,
    mul,
    div,
    power,
    tanh,
    texp,
    tlog,
    tsqrt,
    tabs,
    relu,
    leaky_relu,
    sigmoid,
    clip,
    tsum,
    tmean,
    reshape,
    transpose,
    getitem,
    concat,
    stack,
    pad,
    matmul,
    softmax,
    log_softmax,
    embedding,
    gather_last,
    unfold1d,
    unfold2d,
    dilate1d,
    straight_through,
)
from .rng import named_rng, spawn
from .signal import (
    Spectrogram,
    stft_magnitude,
    hann_window,
    mel_filterbank,
    log_mel,
    median_filter_1d,
    linear_interp,
    sinusoidal_embed,
)
from .dtw import dtw_path, dtw_cost
from .checkpoint import save_checkpoint, load_checkpoint

autodiff_backward = backward

__all__ = [
    "Tensor",
    "backward",
    "autodiff_backward",
    "no_grad",
    "grad_enabled",
    "named_rng",
    "spawn",
    "Spectrogram",
    "stft_magnitude",
    "hann_window",
    "mel_filterbank",
    "log_mel",
    "median_filter_1d",
    "linear_interp",
    "sinusoidal_embed",
    "dtw_path",
    "dtw_cost",
    "save_checkpoint",
    "load_checkpoint",
]
