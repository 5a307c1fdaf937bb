"""Finite-difference self-check of every loss, at the embedding and parameter level.

Consensus targets are computed once at the base point and then held fixed,
which is exactly the stop-gradient the analytic backward pass assumes.
"""

from __future__ import annotations

import numpy as np

from .encoders import EncoderParams
from .losses import BatchEmbeddings, ConsensusConfig, consensus_loss, consensus_scores, finetune_loss, pair_dots
from .losses import align_loss, refine_loss
from .model import background_selection, backward_batch, forward_batch
from .numerics import GradCheckReport, compare_gradients, finite_diff_grad

LOSSES = ("align", "consensus", "refine", "finetune")


def evaluate_loss(name: str, batch: BatchEmbeddings, config: ConsensusConfig, targets=None):
    if name == "align":
        return align_loss(batch, config.tau)
    if name == "consensus":
        return consensus_loss(batch, config, targets)
    if name == "refine":
        return refine_loss(batch, config, targets)
    if name == "finetune":
        return finetune_loss(batch, config.tau)
    raise ValueError(f"unknown loss {name!r}")


def _unit(rng, shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_batch(rng: np.random.Generator, size: int = 4, dim: int = 16, backgrounds: int = 3) -> BatchEmbeddings:
    """Unit-norm embeddings for all three modalities plus background rows."""
    owner = rng.integers(0, size, backgrounds)
    return BatchEmbeddings(
        _unit(rng, (size, dim)),
        _unit(rng, (size, dim)),
        _unit(rng, (size, dim)),
        _unit(rng, (backgrounds, dim)),
        owner,
    )


def _with(batch: BatchEmbeddings, key: str, value: np.ndarray) -> BatchEmbeddings:
    fields = {k: getattr(batch, k) for k in ("vision", "audio", "language", "background", "background_owner")}
    fields[key] = value
    return BatchEmbeddings(**fields)


def check_embedding_gradients(
    name: str, batch: BatchEmbeddings, config: ConsensusConfig = ConsensusConfig(), h: float = 1e-5
) -> GradCheckReport:
    """Compare analytic loss gradients on every embedding array with central differences."""
    if name == "finetune":
        keys = ("vision", "audio", "background")
    else:
        keys = ("vision", "audio", "language")
        batch = _with(batch, "background", None)
    targets = consensus_scores(pair_dots(batch, config), config) if name in ("consensus", "refine") else None
    out = evaluate_loss(name, batch, config, targets)
    analytic, numeric = {}, {}
    for key in keys:
        analytic[key] = out.grads.get(key, np.zeros_like(getattr(batch, key)))
        numeric[key] = finite_diff_grad(lambda x, k=key: evaluate_loss(name, _with(batch, k, x), config, targets).value,
                                        getattr(batch, key), h)
    return compare_gradients(analytic, numeric)


class ModelFixture:
    """Small encoders plus raw inputs, so losses can be probed as functions of parameters."""

    def __init__(self, seed, size: int = 4, dim: int = 16, in_dim: int = 6, frames: int = 2, patches: int = 6,
                 theta: float = 0.5, beta: float = 50.0):
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        init_seed, data_seed, bg_seed = root.spawn(3)
        rng = np.random.default_rng(data_seed)
        self.params = EncoderParams.init(in_dim, dim, None, 2, init_seed)
        self.theta = theta
        self.patches = rng.standard_normal((size, frames, patches, in_dim))
        self.objectness = rng.random((size, frames, patches))
        self.audio = rng.standard_normal((size, in_dim))
        self.narration = rng.standard_normal((size, in_dim))
        self.background = background_selection(self.objectness, theta, beta, bg_seed.spawn(size))

    def forward(self, params: EncoderParams, name: str):
        if name == "finetune":
            return forward_batch(params, self.patches, self.objectness, self.audio, None, self.theta, self.background)
        return forward_batch(params, self.patches, self.objectness, self.audio, self.narration, self.theta)


def check_parameter_gradients(
    name: str, fixture: ModelFixture, config: ConsensusConfig = ConsensusConfig(), h: float = 1e-5
) -> GradCheckReport:
    """Compare backpropagated gradients on every encoder parameter, frozen ones included."""
    params = fixture.params
    fwd = fixture.forward(params, name)
    batch = fwd.embeddings()
    targets = consensus_scores(pair_dots(batch, config), config) if name in ("consensus", "refine") else None
    out = evaluate_loss(name, batch, config, targets)
    analytic, _ = backward_batch(params, fwd, out.grads, include_frozen=True)

    def loss_at(key, value):
        p = params.copy()
        p.named_arrays()[key][...] = value
        return evaluate_loss(name, fixture.forward(p, name).embeddings(), config, targets).value

    numeric, probed = {}, {}
    for key, arr in params.named_arrays().items():
        if name == "finetune" and key.startswith("language."):
            continue  # narration never enters the finetune stage
        probed[key] = analytic.get(key, np.zeros_like(arr))
        numeric[key] = finite_diff_grad(lambda x, k=key: loss_at(k, x), arr, h)
    return compare_gradients(probed, numeric)


def run_gradcheck(
    seed: int = 0, batches: int = 10, size: int = 4, dim: int = 16, h: float = 1e-5, parameters: bool = True
) -> dict[str, GradCheckReport]:
    """Worst-case report per loss over ``batches`` seeded batches."""
    config = ConsensusConfig()
    reports: dict[str, GradCheckReport] = {}
    for k, child in enumerate(np.random.SeedSequence(seed).spawn(batches)):
        emb_seed, model_seed = child.spawn(2)
        batch = random_batch(np.random.default_rng(emb_seed), size, dim)
        fixture = ModelFixture(model_seed, size, dim) if parameters else None
        for name in LOSSES:
            rep = check_embedding_gradients(name, batch, config, h)
            if fixture is not None:
                rep = rep.merge(check_parameter_gradients(name, fixture, config, h))
            reports[name] = reports[name].merge(rep) if name in reports else rep
    return reports
