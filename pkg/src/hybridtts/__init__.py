"""Desk-scale hybrid TTS stack: VQ/FSQ speech codec, autoregressive semantic
decoder, flow-matching acoustic head, hybrid DPO post-training, and a
chunked-streaming serving simulator."""

__version__ = "0.1.0"
