"""Per-modality encoders, object-aware pooling, and their gradients.

Each modality gets a small perceptron (tanh hidden layers, linear output)
mapping raw features into a shared D-dimensional space. The visual encoder
runs on every patch of every frame; the patch embeddings are then pooled
over the object region (or over sampled background patches) and
L2-normalized. Audio and language vectors are encoded and normalized
directly.

All forward functions accept arbitrary leading batch dimensions, so the
same code serves single samples and minibatches.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .maskops import binarize, sample_background
from .numerics import DegenerateInputError, normalize_backward, normalize_rows

MODALITIES = ("vision", "audio", "language")


@dataclass
class Perceptron:
    """Fully connected stack; tanh between layers, none after the last."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {k}: weight {w.shape} incompatible with bias {b.shape}")
            if k and w.shape[0] != self.weights[k - 1].shape[1]:
                raise ValueError(f"layer {k} input does not match previous output")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, hidden: int | None = None, layers: int = 2, rng=None):
        rng = np.random.default_rng(rng)
        hidden = out_dim if hidden is None else hidden
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        weights = [rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
        biases = [np.zeros(b) for b in dims[1:]]
        return cls(weights, biases)

    @classmethod
    def identity(cls, dim: int):
        return cls([np.eye(dim)], [np.zeros(dim)])

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "Perceptron":
        return Perceptron([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        a = x.reshape(-1, self.in_dim)
        acts = [a]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            a = z if k == last else np.tanh(z)
            acts.append(a)
        return a.reshape(*lead, self.out_dim), acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, grad_out: np.ndarray, acts: list[np.ndarray], need_input: bool = False):
        """Return ([(dW, db), ...], d_input or None) for an upstream gradient on the output."""
        g = np.asarray(grad_out).reshape(-1, self.out_dim)
        grads = [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            if k != len(self.weights) - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads[k] = (acts[k].T @ g, g.sum(axis=0))
            if k or need_input:
                g = g @ self.weights[k].T
        grad_in = g.reshape(*np.shape(grad_out)[:-1], self.in_dim) if need_input else None
        return grads, grad_in


@dataclass
class EncoderParams:
    encoders: dict[str, Perceptron]
    frozen: frozenset = field(default_factory=lambda: frozenset({"language"}))

    @classmethod
    def init(
        cls,
        input_dims: Mapping[str, int] | int,
        dim: int = 32,
        hidden: int | None = None,
        layers: int = 2,
        seed=0,
        frozen: Iterable[str] = ("language",),
    ) -> "EncoderParams":
        if isinstance(input_dims, int):
            input_dims = {m: input_dims for m in MODALITIES}
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        streams = root.spawn(len(MODALITIES))
        encoders = {
            m: Perceptron.init(input_dims[m], dim, hidden, layers, np.random.default_rng(s))
            for m, s in zip(MODALITIES, streams)
        }
        return cls(encoders, frozenset(frozen))

    @property
    def dim(self) -> int:
        return self.encoders["vision"].out_dim

    def __getitem__(self, modality: str) -> Perceptron:
        return self.encoders[modality]

    def copy(self) -> "EncoderParams":
        return EncoderParams({m: p.copy() for m, p in self.encoders.items()}, self.frozen)

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Live views keyed like ``vision.W0`` / ``vision.b0``; mutating them updates the params."""
        out = {}
        for m, p in self.encoders.items():
            for k, (w, b) in enumerate(zip(p.weights, p.biases)):
                out[f"{m}.W{k}"] = w
                out[f"{m}.b{k}"] = b
        return out

    def trainable_names(self) -> list[str]:
        return [n for n in self.named_arrays() if n.split(".")[0] not in self.frozen]

    def equals(self, other: "EncoderParams") -> bool:
        a, b = self.named_arrays(), other.named_arrays()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def _named_grads(modality: str, grads) -> dict[str, np.ndarray]:
    out = {}
    for k, (gw, gb) in enumerate(grads):
        out[f"{modality}.W{k}"] = gw
        out[f"{modality}.b{k}"] = gb
    return out


# -- visual path -------------------------------------------------------------

def encode_visual(raw_patches, params: EncoderParams | Perceptron) -> np.ndarray:
    """Map every patch independently through the visual perceptron: (..., T, N, in) -> (..., T, N, D)."""
    net = params["vision"] if isinstance(params, EncoderParams) else params
    return net.forward(raw_patches)[0]


@dataclass
class Pooled:
    """Unit-norm pooled embedding plus what is needed to backpropagate through it."""

    embedding: np.ndarray
    weights: np.ndarray  # (..., T, N) 0/1 selection actually averaged
    norms: np.ndarray
    fallback: np.ndarray  # (...) True where the selection was empty and all patches were used
    valid: np.ndarray  # (...) False where nothing could be pooled (background only)


def _pool(e: np.ndarray, weights: np.ndarray, fallback_to_all: bool) -> Pooled:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != e.shape[:-1]:
        raise ValueError(f"selection shape {weights.shape} does not match patches {e.shape[:-1]}")
    counts = weights.sum(axis=(-2, -1))
    empty = counts == 0
    if fallback_to_all and np.any(empty):
        weights = np.where(empty[..., None, None], 1.0, weights)
        counts = weights.sum(axis=(-2, -1))
    valid = counts > 0
    safe = np.where(valid, counts, 1.0)
    mean = np.einsum("...tn,...tnd->...d", weights, e) / safe[..., None]
    norms = np.linalg.norm(mean, axis=-1, keepdims=True)
    if np.any(valid & (norms[..., 0] == 0.0)):
        raise DegenerateInputError("pooled visual embedding is the zero vector")
    unit = np.where(valid[..., None], mean / np.where(norms == 0, 1.0, norms), 0.0)
    return Pooled(unit, weights, np.where(norms == 0, 1.0, norms), empty & fallback_to_all, valid)


def object_aware_pool(e, grid, theta: float = 0.5) -> Pooled:
    """Zero patches whose objectness is below theta and mean-pool the rest.

    If no patch survives, every patch is pooled instead and ``fallback`` is
    set, so a bad mask degrades to global pooling rather than an error.
    """
    e = np.asarray(e, dtype=np.float64)
    return _pool(e, binarize(grid, theta), fallback_to_all=True)


def background_weights(grid, theta: float, beta: float, seed) -> np.ndarray:
    """0/1 selection of sampled background patches for one sample (raises if none exist)."""
    grid = np.asarray(grid, dtype=np.float64)
    sel = np.zeros(grid.shape)
    for t, n in sample_background(grid, theta, beta, seed):
        sel[t, n] = 1.0
    return sel


def background_pool(e, grid, theta: float = 0.5, beta: float = 50.0, seed=0) -> Pooled:
    """Mean of a seeded random beta% of the non-object patches, normalized."""
    e = np.asarray(e, dtype=np.float64)
    return _pool(e, background_weights(grid, theta, beta, seed), fallback_to_all=False)


def pool_backward(grad_unit: np.ndarray, pooled: Pooled) -> np.ndarray:
    """Gradient on the patch embeddings from a gradient on the pooled unit vector."""
    grad_mean = normalize_backward(np.asarray(grad_unit), pooled.embedding, pooled.norms)
    counts = np.where(pooled.valid, pooled.weights.sum(axis=(-2, -1)), 1.0)
    grad_mean = np.where(pooled.valid[..., None], grad_mean, 0.0) / counts[..., None]
    return pooled.weights[..., None] * grad_mean[..., None, None, :]


@dataclass
class VisualTrace:
    """Recorded visual forward pass (object pooling plus optional background pooling)."""

    patches: np.ndarray
    acts: list
    obj: Pooled
    bg: Pooled | None

    @property
    def embedding(self) -> np.ndarray:
        return self.obj.embedding

    @property
    def background(self) -> np.ndarray | None:
        return None if self.bg is None else self.bg.embedding


def visual_forward(
    raw_patches,
    params: EncoderParams,
    grid,
    theta: float = 0.5,
    background_selection=None,
) -> VisualTrace:
    """Encode patches, pool over the object region, optionally pool a background selection.

    ``background_selection`` is a 0/1 array shaped like ``grid``; rows that
    select nothing produce an invalid (zero) background embedding.
    """
    patches, acts = params["vision"].forward(raw_patches)
    obj = object_aware_pool(patches, grid, theta)
    bg = None
    if background_selection is not None:
        bg = _pool(patches, background_selection, fallback_to_all=False)
    return VisualTrace(patches, acts, obj, bg)


def backward_visual(
    trace: VisualTrace,
    params: EncoderParams,
    grad_embedding,
    grad_background=None,
    need_input: bool = False,
):
    """Parameter gradients (and optionally raw-patch gradients) of the visual path."""
    grad_patches = pool_backward(grad_embedding, trace.obj)
    if grad_background is not None:
        if trace.bg is None:
            raise ValueError("trace has no background pooling to differentiate")
        grad_patches = grad_patches + pool_backward(grad_background, trace.bg)
    grads, grad_in = params["vision"].backward(grad_patches, trace.acts, need_input)
    return _named_grads("vision", grads), grad_in


# -- audio / language --------------------------------------------------------

@dataclass
class VectorTrace:
    modality: str
    embedding: np.ndarray
    norms: np.ndarray
    acts: list


def vector_forward(feature, params: EncoderParams, modality: str) -> VectorTrace:
    raw, acts = params[modality].forward(feature)
    unit, norms = normalize_rows(raw)
    return VectorTrace(modality, unit, norms, acts)


def encode_audio(feature, params: EncoderParams) -> np.ndarray:
    return vector_forward(feature, params, "audio").embedding


def encode_language(feature, params: EncoderParams) -> np.ndarray:
    return vector_forward(feature, params, "language").embedding


def _backward_vector(trace: VectorTrace, params: EncoderParams, grad_embedding):
    grad_raw = normalize_backward(np.asarray(grad_embedding), trace.embedding, trace.norms)
    grads, _ = params[trace.modality].backward(grad_raw, trace.acts)
    return _named_grads(trace.modality, grads)


def backward_audio(trace: VectorTrace, params: EncoderParams, grad_embedding):
    return _backward_vector(trace, params, grad_embedding)


def backward_language(trace: VectorTrace, params: EncoderParams, grad_embedding):
    return _backward_vector(trace, params, grad_embedding)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"SNDCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: EncoderParams, stage: str, epoch: int) -> None:
    """Write magic, version, stage, epoch, per-modality layer shapes, then float64 LE parameters."""
    head = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    sb = stage.encode()
    head.append(struct.pack("<I", len(sb)) + sb)
    head.append(struct.pack("<II", epoch, len(params.encoders)))
    body = []
    for m, p in params.encoders.items():
        mb = m.encode()
        head.append(struct.pack("<I", len(mb)) + mb)
        head.append(struct.pack("<BI", int(m in params.frozen), len(p.weights)))
        for w, b in zip(p.weights, p.biases):
            head.append(struct.pack("<II", *w.shape))
            body.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            body.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(head + body))


def load_checkpoint(path) -> tuple[EncoderParams, dict]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (slen,) = struct.unpack("<I", take(4))
    stage = take(slen).decode()
    epoch, n_mod = struct.unpack("<II", take(8))
    layout = []
    for _ in range(n_mod):
        (mlen,) = struct.unpack("<I", take(4))
        name = take(mlen).decode()
        frozen, n_layers = struct.unpack("<BI", take(5))
        shapes = [struct.unpack("<II", take(8)) for _ in range(n_layers)]
        layout.append((name, bool(frozen), shapes))
    encoders, frozen_set = {}, set()
    for name, frozen, shapes in layout:
        ws, bs = [], []
        for rows, cols in shapes:
            ws.append(np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64))
            bs.append(np.frombuffer(take(8 * cols), dtype="<f8").astype(np.float64))
        encoders[name] = Perceptron(ws, bs)
        if frozen:
            frozen_set.add(name)
    if pos != len(data):
        raise CheckpointError(f"trailing bytes after offset {pos}")
    return EncoderParams(encoders, frozenset(frozen_set)), {"stage": stage, "epoch": epoch, "version": version}
