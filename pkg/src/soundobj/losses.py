"""Contrastive objectives for the three training stages, with analytic gradients.

All embeddings are unit-norm rows, so a dot product is a cosine similarity.
Every loss returns a :class:`LossOutput` whose ``grads`` map modality names
("vision", "audio", "language", "background") to arrays shaped like the
corresponding inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import log_sum_exp_rows, softmax_rows

_KINK_TOL = 1e-12
PAIRS = (("vision", "audio"), ("vision", "language"), ("audio", "language"))


@dataclass
class BatchEmbeddings:
    vision: np.ndarray
    audio: np.ndarray
    language: np.ndarray | None = None
    background: np.ndarray | None = None  # (M, D) hard negatives, any number per sample
    background_owner: np.ndarray | None = None  # (M,) sample index of each background row

    def __post_init__(self):
        self.vision = np.atleast_2d(np.asarray(self.vision, dtype=np.float64))
        self.audio = np.atleast_2d(np.asarray(self.audio, dtype=np.float64))
        if self.vision.shape != self.audio.shape:
            raise ValueError(f"vision {self.vision.shape} and audio {self.audio.shape} differ")
        if self.language is not None:
            self.language = np.atleast_2d(np.asarray(self.language, dtype=np.float64))
            if self.language.shape != self.vision.shape:
                raise ValueError("language embeddings have the wrong shape")
        if self.background is not None:
            self.background = np.asarray(self.background, dtype=np.float64).reshape(-1, self.dim)
            if self.background_owner is None:
                self.background_owner = np.full(len(self.background), -1)
            self.background_owner = np.asarray(self.background_owner, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.vision.shape[0]

    @property
    def dim(self) -> int:
        return self.vision.shape[1]

    def get(self, modality: str) -> np.ndarray:
        arr = getattr(self, modality)
        if arr is None:
            raise ValueError(f"batch has no {modality} embeddings")
        return arr


@dataclass
class LossOutput:
    value: float
    grads: dict[str, np.ndarray]
    parts: dict = field(default_factory=dict)

    def __add__(self, other: "LossOutput") -> "LossOutput":
        grads = dict(self.grads)
        for k, g in other.grads.items():
            grads[k] = grads[k] + g if k in grads else g
        return LossOutput(self.value + other.value, grads, {**self.parts, **other.parts})


@dataclass(frozen=True)
class ConsensusConfig:
    anchor: str = "audio"
    alphas: tuple[tuple[str, float], ...] = (("vision", 0.5), ("language", 1.0))
    tau: float = 0.07

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        for name, a in self.alphas:
            if a <= 0:
                raise ValueError(f"alpha for {name} must be positive")
            if name == self.anchor:
                raise ValueError("the anchor modality cannot carry an alpha")


def _check_tau(tau: float):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def info_nce_pair(x, y, tau: float = 0.07) -> LossOutput:
    """Symmetric InfoNCE: mean over anchors of -log softmax at the matching index, both directions.

    Returns grads under keys "x" and "y".
    """
    _check_tau(tau)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape or x.shape[0] < 1:
        raise ValueError(f"need equal, non-empty batches, got {x.shape} and {y.shape}")
    b = x.shape[0]
    s = x @ y.T / tau
    diag = np.diag(s)
    l_xy = float(np.mean(log_sum_exp_rows(s) - diag))
    l_yx = float(np.mean(log_sum_exp_rows(s.T) - diag))
    eye = np.eye(b)
    ds = (softmax_rows(s) - eye) / b + (softmax_rows(s.T) - eye).T / b
    gx = ds @ y / tau
    gy = ds.T @ x / tau
    return LossOutput(l_xy + l_yx, {"x": gx, "y": gy}, {"xy": l_xy, "yx": l_yx})


def align_loss(batch: BatchEmbeddings, tau: float = 0.07) -> LossOutput:
    """Sum of symmetric InfoNCE over the vision-audio, vision-language and audio-language pairs."""
    grads = {m: np.zeros_like(batch.vision) for m in ("vision", "audio", "language")}
    total = 0.0
    parts = {}
    for a, b in PAIRS:
        out = info_nce_pair(batch.get(a), batch.get(b), tau)
        total += out.value
        grads[a] += out.grads["x"]
        grads[b] += out.grads["y"]
        parts[f"{a}-{b}"] = out.value
    return LossOutput(total, grads, {"align": total, **parts})


def kappa(t, alpha: float):
    """((t + 1) / 2) ** alpha on t in [-1, 1]; endpoints within 1e-9 are clipped."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < -1 - 1e-9) or np.any(t > 1 + 1e-9):
        raise ValueError("kappa is defined on [-1, 1]")
    u = np.clip((t + 1.0) / 2.0, 0.0, 1.0)
    out = u**alpha
    return float(out) if out.ndim == 0 else out


def kappa_inv(u):
    """Inverse of the alpha = 1 map: u -> 2u - 1, back to the similarity range."""
    u = np.asarray(u, dtype=np.float64)
    out = 2.0 * u - 1.0
    return float(out) if out.ndim == 0 else out


def consensus_scores(dots: dict[str, np.ndarray], config: ConsensusConfig = ConsensusConfig()) -> np.ndarray:
    """Per-sample consensus c^i from each non-anchor modality's dot with the anchor.

    ``dots`` maps modality name to a (B,) array of e_x^i . e_anchor^i.
    """
    transformed = [kappa(np.clip(np.asarray(dots[name], dtype=np.float64), -1.0, 1.0), a) for name, a in config.alphas]
    return kappa_inv(np.minimum.reduce([np.atleast_1d(t) for t in transformed]))


def pair_dots(batch: BatchEmbeddings, config: ConsensusConfig) -> dict[str, np.ndarray]:
    anchor = batch.get(config.anchor)
    return {name: np.sum(batch.get(name) * anchor, axis=1) for name, _ in config.alphas}


def consensus_loss(
    batch: BatchEmbeddings, config: ConsensusConfig = ConsensusConfig(), targets=None
) -> LossOutput:
    """Mean over samples of sum_x |e_x . e_anchor - c|, with c held constant.

    ``targets`` overrides the consensus scores (used to freeze c while
    probing gradients numerically).
    """
    anchor = batch.get(config.anchor)
    dots = pair_dots(batch, config)
    c = consensus_scores(dots, config) if targets is None else np.asarray(targets, dtype=np.float64)
    b = batch.size
    grads = {config.anchor: np.zeros_like(anchor)}
    total = 0.0
    for name, _ in config.alphas:
        resid = dots[name] - c
        # with alpha = 1 the minimizing modality reproduces c up to rounding
        resid = np.where(np.abs(resid) < _KINK_TOL, 0.0, resid)
        total += float(np.sum(np.abs(resid)))
        sign = np.sign(resid)[:, None] / b  # sign(0) = 0 is the chosen subgradient
        grads[name] = sign * anchor
        grads[config.anchor] = grads[config.anchor] + sign * batch.get(name)
    value = total / b
    return LossOutput(value, grads, {"consensus": value, "targets": c})


def refine_loss(batch: BatchEmbeddings, config: ConsensusConfig = ConsensusConfig(), targets=None) -> LossOutput:
    out = align_loss(batch, config.tau) + consensus_loss(batch, config, targets)
    out.parts["refine"] = out.value
    return out


def finetune_loss(batch: BatchEmbeddings, tau: float = 0.07) -> LossOutput:
    """Audio-vision InfoNCE with background embeddings added to both denominators.

    audio->vision: anchor e_a^i against all e_v^l and every background row.
    vision->audio: anchor e_v^i against all e_a^l, plus every background row
    scored against the positive audio e_a^i.
    """
    _check_tau(tau)
    v, a = batch.vision, batch.audio
    bsz = batch.size
    bg = batch.background if batch.background is not None else np.zeros((0, batch.dim))
    m = bg.shape[0]
    eye = np.eye(bsz)

    s_av = a @ v.T / tau  # [i, l] = a_i . v_l
    s_ab = a @ bg.T / tau  # [i, m] = a_i . b_m
    diag = np.diag(s_av)

    logits_av = np.concatenate([s_av, s_ab], axis=1)
    l_av = float(np.mean(log_sum_exp_rows(logits_av) - diag))
    p_av = softmax_rows(logits_av)
    d_av = (p_av[:, :bsz] - eye) / bsz
    d_ab = p_av[:, bsz:] / bsz

    logits_va = np.concatenate([s_av.T, s_ab], axis=1)  # row i: v_i . a_l, then b_m . a_i
    l_va = float(np.mean(log_sum_exp_rows(logits_va) - diag))
    p_va = softmax_rows(logits_va)
    d_va = (p_va[:, :bsz] - eye) / bsz  # [i, l] on v_i . a_l
    d_ab2 = p_va[:, bsz:] / bsz  # [i, m] on a_i . b_m

    d_ab_total = d_ab + d_ab2
    g_a = (d_av @ v + d_va.T @ v + d_ab_total @ bg) / tau
    g_v = (d_av.T @ a + d_va @ a) / tau
    g_b = d_ab_total.T @ a / tau
    grads = {"vision": g_v, "audio": g_a, "background": g_b.reshape(m, batch.dim)}
    value = l_av + l_va
    return LossOutput(value, grads, {"finetune": value, "audio->vision": l_av, "vision->audio": l_va})


def stage_loss(stage: str, batch: BatchEmbeddings, config: ConsensusConfig) -> LossOutput:
    if stage == "align":
        return align_loss(batch, config.tau)
    if stage == "refine":
        return refine_loss(batch, config)
    if stage == "finetune":
        return finetune_loss(batch, config.tau)
    raise ValueError(f"unknown stage {stage!r}")
