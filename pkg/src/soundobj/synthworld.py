"""Procedural stand-in for egocentric interaction clips.

A world is a set of unit-norm prototype banks: per-material visual and
audio prototypes, per-action narration and audio prototypes, scene
prototypes for background patches, one visual contact cue marking objects
being handled, and off-screen audio prototypes (one by default). A sample
places rectangular objects on the patch grid, marks one or two of them as
the interacting objects, and emits patch features, an audio feature, a
narration feature and a candidate pool.

Sounding clips pair the interaction with its audio (material prototype plus
a weaker action component). Non-sounding clips keep the interaction on
screen but carry an off-screen prototype as audio.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .maskops import CandidatePool, iou_matrix, match_candidates, patchify_mask, read_mask, rect_mask, write_mask

DATASET_MAGIC = b"SNDOBJ1"


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    n_materials: int = 2
    n_actions: int = 4
    n_scenes: int = 4
    height: int = 96
    width: int = 96
    patch_size: int = 16
    frames: int = 2
    input_dim: int = 32
    audio_dim: int = 32
    narration_dim: int = 32
    noise: float = 0.05
    p_nonsounding: float = 0.413
    p_pair: float = 0.1
    objects: tuple[int, int] = (2, 6)
    candidates: tuple[int, int] = (5, 7)
    object_size: tuple[int, int] = (1, 2)  # side length in patches
    interaction_strength: float = 1.0
    clutter: float = 1.0
    n_offscreen: int = 1
    audio_action_weight: float = 0.5
    jitter: int = 2
    min_iou: float = 0.5

    def __post_init__(self):
        for name in ("objects", "candidates", "object_size"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError("image extents must be divisible by the patch size")
        if self.n_materials < 2 or self.n_actions < 2:
            raise ValueError("need at least 2 materials and 2 actions")
        if self.n_scenes < 1 or self.n_offscreen < 1:
            raise ValueError("need at least one scene and one off-screen prototype")
        if self.noise < 0 or not 0 <= self.p_nonsounding <= 1 or not 0 <= self.p_pair <= 1:
            raise ValueError("noise must be >= 0 and probabilities in [0, 1]")
        lo, hi = self.objects
        if not 2 <= lo <= hi:
            raise ValueError("object count range must start at 2 or more")
        if self.candidates[0] > self.candidates[1] or self.candidates[0] < 1:
            raise ValueError("bad candidate count range")
        if self.frames < 1 or min(self.object_size) < 1:
            raise ValueError("frames and object sizes must be >= 1")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid_shape
        return gh * gw

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown world spec keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class WorldBanks:
    visual: np.ndarray  # (materials, input_dim)
    audio: np.ndarray  # (materials, audio_dim)
    narration: np.ndarray  # (actions, narration_dim)
    contact: np.ndarray  # (input_dim,) visual cue shared by every interacting object
    action_audio: np.ndarray  # (actions, audio_dim)
    scene: np.ndarray  # (scenes, input_dim)
    offscreen: np.ndarray  # (n_offscreen, audio_dim)

    def audio_prototypes(self) -> np.ndarray:
        return np.vstack([self.audio, self.offscreen])


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_world(spec: WorldSpec, seed) -> WorldBanks:
    spec.validate()
    rng = np.random.default_rng(seed)
    return WorldBanks(
        visual=_unit_rows(rng, spec.n_materials, spec.input_dim),
        audio=_unit_rows(rng, spec.n_materials, spec.audio_dim),
        narration=_unit_rows(rng, spec.n_actions, spec.narration_dim),
        contact=_unit_rows(rng, 1, spec.input_dim)[0],
        action_audio=_unit_rows(rng, spec.n_actions, spec.audio_dim),
        scene=_unit_rows(rng, spec.n_scenes, spec.input_dim),
        offscreen=_unit_rows(rng, spec.n_offscreen, spec.audio_dim),
    )


@dataclass
class SyntheticSample:
    patches: np.ndarray  # (T, N, input_dim)
    object_masks: list[np.ndarray]
    materials: list[int]
    interacting: list[int]  # indices into object_masks of the sounding objects
    action: int
    scene: int
    audio: np.ndarray
    narration: np.ndarray
    sounding: bool
    pool: CandidatePool
    boxes: list[tuple[int, int, int, int]] = field(default_factory=list)  # (top, left, h, w) in pixels

    @property
    def gt_masks(self) -> list[np.ndarray]:
        return [self.object_masks[i] for i in self.interacting]

    @property
    def distractor_masks(self) -> list[np.ndarray]:
        return [m for i, m in enumerate(self.object_masks) if i not in self.interacting]

    def interaction_mask(self) -> np.ndarray:
        return np.logical_or.reduce(self.gt_masks)

    def objectness(self, patch_size: int) -> np.ndarray:
        return patchify_mask(self.interaction_mask(), patch_size)

    def equals(self, other: "SyntheticSample") -> bool:
        return (
            np.array_equal(self.patches, other.patches)
            and len(self.object_masks) == len(other.object_masks)
            and all(np.array_equal(a, b) for a, b in zip(self.object_masks, other.object_masks))
            and self.materials == other.materials
            and self.interacting == other.interacting
            and (self.action, self.scene, self.sounding) == (other.action, other.scene, other.sounding)
            and np.array_equal(self.audio, other.audio)
            and np.array_equal(self.narration, other.narration)
            and len(self.pool) == len(other.pool)
            and all(np.array_equal(a, b) for a, b in zip(self.pool.candidates, other.pool.candidates))
            and self.pool.positive_indices == other.pool.positive_indices
        )


def _place_objects(rng, spec: WorldSpec, count: int, attempts: int = 200):
    gh, gw = spec.grid_shape
    occupied = np.zeros((gh, gw), dtype=bool)
    cells = []
    for _ in range(count):
        for _ in range(attempts):
            h = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
            w = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
            if h > gh or w > gw:
                continue
            r = int(rng.integers(0, gh - h + 1))
            c = int(rng.integers(0, gw - w + 1))
            if not occupied[r : r + h, c : c + w].any():
                occupied[r : r + h, c : c + w] = True
                cells.append((r, c, h, w))
                break
        else:
            raise PlacementError(f"could not place {count} non-overlapping objects")
    return cells


def _distractors(rng, spec: WorldSpec, shape, gts, existing, count: int, attempts: int = 500):
    out = []
    lo, hi = spec.patch_size, 2 * spec.patch_size
    for _ in range(attempts):
        if len(out) == count:
            break
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, hi + 1))
        top = int(rng.integers(0, spec.height - h + 1))
        left = int(rng.integers(0, spec.width - w + 1))
        m = rect_mask(shape, top, left, h, w)
        if iou_matrix([m], gts).max() >= 0.25:
            continue
        if iou_matrix([m], existing + out).max(initial=0.0) >= 0.5:
            continue
        out.append(m)
    if len(out) < count:
        raise PlacementError("could not place distractor candidates")
    return out


def generate_sample(banks: WorldBanks, spec: WorldSpec, seed) -> SyntheticSample:
    rng = np.random.default_rng(seed)
    shape = (spec.frames, spec.height, spec.width)
    ps = spec.patch_size
    gh, gw = spec.grid_shape

    n_obj = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    cells = _place_objects(rng, spec, n_obj)
    materials = [int(m) for m in rng.integers(0, spec.n_materials, size=n_obj)]
    n_inter = 2 if rng.random() < spec.p_pair else 1
    interacting = sorted(int(i) for i in rng.choice(n_obj, size=n_inter, replace=False))
    action = int(rng.integers(spec.n_actions))
    scene = int(rng.integers(spec.n_scenes))
    sounding = bool(rng.random() >= spec.p_nonsounding)

    # patch features: scene plus per-patch clutter in the background, material
    # prototype on objects, plus the contact cue on the interacting objects
    clutter = rng.standard_normal((gh, gw, spec.input_dim)) / np.sqrt(spec.input_dim)
    base = banks.scene[scene] + spec.clutter * clutter
    for k, (r, c, h, w) in enumerate(cells):
        base[r : r + h, c : c + w] = banks.visual[materials[k]]
        if k in interacting:
            base[r : r + h, c : c + w] += spec.interaction_strength * banks.contact
    base = base.reshape(gh * gw, spec.input_dim)
    patches = base[None] + spec.noise * rng.standard_normal((spec.frames, gh * gw, spec.input_dim))

    if sounding:
        mat = banks.audio[[materials[i] for i in interacting]].mean(axis=0)
        mat = mat / np.linalg.norm(mat)
        clean = mat + spec.audio_action_weight * banks.action_audio[action]
        clean = clean / np.linalg.norm(clean)
    else:
        clean = banks.offscreen[rng.integers(len(banks.offscreen))]
    audio = clean + spec.noise * rng.standard_normal(spec.audio_dim)
    narration = banks.narration[action] + spec.noise * rng.standard_normal(spec.narration_dim)

    boxes = [(r * ps, c * ps, h * ps, w * ps) for r, c, h, w in cells]
    object_masks = [rect_mask(shape, *b) for b in boxes]
    gts = [object_masks[i] for i in interacting]

    # detector-like candidates: every object with a small pixel jitter, then
    # random rectangles away from the ground truth to fill the pool
    j = spec.jitter
    detected = []
    for top, left, h, w in boxes:
        dy, dx = (int(v) for v in rng.integers(-j, j + 1, size=2)) if j else (0, 0)
        detected.append(rect_mask(shape, top + dy, left + dx, h, w))
    target = max(n_obj, int(rng.integers(spec.candidates[0], spec.candidates[1] + 1)))
    candidates = detected + _distractors(rng, spec, shape, gts, detected, target - n_obj)
    order = rng.permutation(len(candidates))
    pool = match_candidates([candidates[k] for k in order], gts, spec.min_iou)

    return SyntheticSample(
        patches=patches,
        object_masks=object_masks,
        materials=materials,
        interacting=interacting,
        action=action,
        scene=scene,
        audio=audio,
        narration=narration,
        sounding=sounding,
        pool=pool,
        boxes=boxes,
    )


SPLITS = {"train": 0, "finetune": 1, "eval": 2}


def sample_seed(root_seed: int, split: str | int, index: int) -> np.random.SeedSequence:
    """Independent stream per (root seed, split, index); splits never share a stream."""
    split_id = SPLITS[split] if isinstance(split, str) else int(split)
    return np.random.SeedSequence([int(root_seed), 1 + split_id, int(index)])


def generate_dataset(spec: WorldSpec, count: int, seed: int, split: str | int = "train", banks=None):
    banks = generate_world(spec, seed) if banks is None else banks
    return [generate_sample(banks, spec, sample_seed(seed, split, i)) for i in range(count)]


# -- file format ---------------------------------------------------------------

class DatasetFormatError(ValueError):
    pass


def _u32(*vals) -> bytes:
    return struct.pack(f"<{len(vals)}I", *vals)


def _write_vector(fh, v: np.ndarray):
    fh.write(_u32(v.size))
    fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def write_dataset(path, samples: Sequence[SyntheticSample], spec: WorldSpec | None = None, extra: dict | None = None) -> None:
    """Serialize samples; the spec block is a length-prefixed JSON document."""
    header = {"world": spec.to_dict() if spec is not None else None, **(extra or {})}
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    block = json.dumps(header, sort_keys=True).encode()
    buf.write(_u32(len(block)))
    buf.write(block)
    buf.write(_u32(len(samples)))
    for s in samples:
        buf.write(_u32(*s.patches.shape))
        buf.write(np.ascontiguousarray(s.patches, dtype="<f8").tobytes())
        buf.write(_u32(len(s.object_masks)))
        for mat, m in zip(s.materials, s.object_masks):
            buf.write(_u32(mat))
            write_mask(buf, m)
        buf.write(_u32(len(s.interacting), *s.interacting))
        buf.write(_u32(s.action, s.scene))
        buf.write(struct.pack("<B", int(s.sounding)))
        _write_vector(buf, s.audio)
        _write_vector(buf, s.narration)
        buf.write(_u32(len(s.pool)))
        for m in s.pool.candidates:
            write_mask(buf, m)
        buf.write(_u32(len(s.pool.positive_indices), *s.pool.positive_indices))
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.fh = io.BytesIO(data)
        self.size = len(data)

    def take(self, n: int) -> bytes:
        pos = self.fh.tell()
        chunk = self.fh.read(n)
        if len(chunk) != n:
            raise DatasetFormatError(f"truncated dataset at byte {pos}: wanted {n} bytes")
        return chunk

    def u32(self, n: int = 1):
        vals = struct.unpack(f"<{n}I", self.take(4 * n))
        return vals[0] if n == 1 else list(vals)

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def mask(self) -> np.ndarray:
        try:
            return read_mask(self.fh)
        except ValueError as exc:
            raise DatasetFormatError(str(exc)) from exc


def read_dataset(path) -> tuple[list[SyntheticSample], dict]:
    """Inverse of :func:`write_dataset`; returns (samples, header)."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(DATASET_MAGIC)) != DATASET_MAGIC:
        raise DatasetFormatError("bad magic at byte 0: not a sounding-object dataset")
    block_len = r.u32()
    try:
        header = json.loads(r.take(block_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"malformed spec block at byte {len(DATASET_MAGIC) + 4}") from exc
    count = r.u32()
    samples = []
    for _ in range(count):
        t, n, d = r.u32(3)
        patches = r.floats(t * n * d).reshape(t, n, d)
        n_obj = r.u32()
        materials, masks = [], []
        for _ in range(n_obj):
            materials.append(r.u32())
            masks.append(r.mask())
        n_inter = r.u32()
        interacting = [r.u32() for _ in range(n_inter)]
        action, scene = r.u32(2)
        pos = r.fh.tell()
        flag = r.take(1)[0]
        if flag > 1:
            raise DatasetFormatError(f"bad sounding flag at byte {pos}")
        audio = r.floats(r.u32())
        narration = r.floats(r.u32())
        n_cand = r.u32()
        cands = [r.mask() for _ in range(n_cand)]
        n_pos = r.u32()
        positives = [r.u32() for _ in range(n_pos)]
        pos = r.fh.tell()
        try:
            pool = CandidatePool(cands, tuple(positives))
        except ValueError as exc:
            raise DatasetFormatError(f"invalid candidate pool ending at byte {pos}: {exc}") from exc
        samples.append(
            SyntheticSample(patches, masks, materials, interacting, action, scene, audio, narration, bool(flag), pool)
        )
    if r.fh.tell() != r.size:
        raise DatasetFormatError(f"trailing bytes after offset {r.fh.tell()}")
    return samples, header
