"""Batch-level forward and backward passes through encoders and pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import (
    EncoderParams,
    VectorTrace,
    VisualTrace,
    backward_audio,
    backward_language,
    backward_visual,
    background_weights,
    vector_forward,
    visual_forward,
)
from .losses import BatchEmbeddings
from .numerics import DegenerateInputError


@dataclass
class BatchForward:
    visual: VisualTrace
    audio: VectorTrace
    language: VectorTrace | None
    background_rows: np.ndarray  # sample indices that produced a background embedding

    def embeddings(self) -> BatchEmbeddings:
        bg = None
        if self.visual.bg is not None and len(self.background_rows):
            bg = self.visual.background[self.background_rows]
        return BatchEmbeddings(
            vision=self.visual.embedding,
            audio=self.audio.embedding,
            language=None if self.language is None else self.language.embedding,
            background=bg,
            background_owner=self.background_rows if bg is not None else None,
        )


def background_selection(objectness: np.ndarray, theta: float, beta: float, seeds) -> np.ndarray:
    """Stack per-sample background selections; samples without background get an all-zero row."""
    out = np.zeros(objectness.shape)
    for i, (grid, seed) in enumerate(zip(objectness, seeds)):
        try:
            out[i] = background_weights(grid, theta, beta, seed)
        except DegenerateInputError:
            pass
    return out


def forward_batch(
    params: EncoderParams,
    patches: np.ndarray,
    objectness: np.ndarray,
    audio: np.ndarray,
    narration: np.ndarray | None = None,
    theta: float = 0.5,
    background: np.ndarray | None = None,
) -> BatchForward:
    """Embed a minibatch.

    ``patches`` is (B, T, N, F), ``objectness`` (B, T, N). ``background`` is
    an optional 0/1 selection shaped like ``objectness``; all-zero rows mean
    the sample contributes no hard negative.
    """
    vis = visual_forward(patches, params, objectness, theta, background)
    aud = vector_forward(audio, params, "audio")
    lang = None if narration is None else vector_forward(narration, params, "language")
    rows = np.flatnonzero(vis.bg.valid) if vis.bg is not None else np.zeros(0, dtype=np.int64)
    return BatchForward(vis, aud, lang, rows)


def backward_batch(
    params: EncoderParams,
    fwd: BatchForward,
    grads: dict[str, np.ndarray],
    include_frozen: bool = False,
    need_input: bool = False,
):
    """Parameter gradients from embedding gradients; frozen encoders are skipped unless asked.

    Returns (param_grads, patch_input_grad or None).
    """
    out: dict[str, np.ndarray] = {}
    g_bg = None
    if "background" in grads and len(fwd.background_rows):
        g_bg = np.zeros_like(fwd.visual.bg.embedding)
        g_bg[fwd.background_rows] = grads["background"]
    g_v = grads.get("vision", np.zeros_like(fwd.visual.embedding))
    vis_grads, g_in = backward_visual(fwd.visual, params, g_v, g_bg, need_input=need_input)
    out.update(vis_grads)
    if "audio" in grads:
        out.update(backward_audio(fwd.audio, params, grads["audio"]))
    if fwd.language is not None and "language" in grads and (include_frozen or "language" not in params.frozen):
        out.update(backward_language(fwd.language, params, grads["language"]))
    return out, g_in
