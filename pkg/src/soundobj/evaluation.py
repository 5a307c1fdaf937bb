"""Sounding object detection and sounding action discovery protocols.

Detection: cosine between every patch embedding of one frame and the audio
embedding, bilinearly upsampled to pixels, mean-pooled under each candidate
mask; the top candidate is the prediction. Discovery: per-clip audio-vision
and audio-language cosines ranked against the sounding flag (ROC and PR
areas). Also average-linkage clustering of embeddings and the vision-only
IoU baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .encoders import EncoderParams, encode_audio, encode_language, encode_visual, object_aware_pool
from .maskops import CandidatePool, as_mask, background_indices, mask_iou
from .model import background_selection, forward_batch
from .synthworld import SyntheticSample


# -- similarity maps -----------------------------------------------------------

@dataclass
class SimilarityMap:
    patch_scores: np.ndarray  # (T', N)
    pixels: np.ndarray  # (T', H, W)
    grid_shape: tuple[int, int]
    frames: tuple[int, ...]  # source frame index of each map
    degenerate: np.ndarray  # (T', N) True where a patch embedding had zero norm


def bilinear_sample(grid_scores: np.ndarray, ys, xs, patch_size: int) -> np.ndarray:
    """Interpolate a (gh, gw) score grid at continuous pixel coordinates.

    Patch (i, j) is anchored at its center ((i + .5) * p, (j + .5) * p);
    outside the outermost centers the value is clamped to the edge.
    """
    grid_scores = np.asarray(grid_scores, dtype=np.float64)
    gh, gw = grid_scores.shape
    gy = np.clip(np.asarray(ys, dtype=np.float64) / patch_size - 0.5, 0.0, gh - 1)
    gx = np.clip(np.asarray(xs, dtype=np.float64) / patch_size - 0.5, 0.0, gw - 1)
    y0 = np.floor(gy).astype(int)
    x0 = np.floor(gx).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    wy = gy - y0
    wx = gx - x0
    top = grid_scores[y0, x0] * (1 - wx) + grid_scores[y0, x1] * wx
    bottom = grid_scores[y1, x0] * (1 - wx) + grid_scores[y1, x1] * wx
    return top * (1 - wy) + bottom * wy


def upsample(grid_scores: np.ndarray, height: int, width: int, patch_size: int) -> np.ndarray:
    """Pixel map sampled at pixel centers (r + .5, c + .5)."""
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    return bilinear_sample(grid_scores, ys[:, None], xs[None, :], patch_size)


def similarity_map(
    patch_embeddings, audio_embedding, height: int, width: int, patch_size: int, frames: Sequence[int] | None = None
) -> SimilarityMap:
    """Per-patch cosine to the audio embedding, upsampled to H x W per frame."""
    e = np.asarray(patch_embeddings, dtype=np.float64)
    if e.ndim == 2:
        e = e[None]
    if height % patch_size or width % patch_size:
        raise ValueError("extents not divisible by the patch size")
    gh, gw = height // patch_size, width // patch_size
    if e.shape[1] != gh * gw:
        raise ValueError(f"expected {gh * gw} patches per frame, got {e.shape[1]}")
    a = np.asarray(audio_embedding, dtype=np.float64)
    a = a / np.linalg.norm(a)
    norms = np.linalg.norm(e, axis=-1)
    degenerate = norms == 0.0
    scores = np.where(degenerate, 0.0, (e @ a) / np.where(degenerate, 1.0, norms))
    scores = np.clip(scores, -1.0, 1.0)
    pixels = np.stack([upsample(s.reshape(gh, gw), height, width, patch_size) for s in scores])
    frames = tuple(range(len(e))) if frames is None else tuple(frames)
    return SimilarityMap(scores, pixels, (gh, gw), frames, degenerate)


# -- detection -----------------------------------------------------------------

@dataclass
class DetectionResult:
    scores: np.ndarray
    predicted: int
    hit: bool


def detect_from_scores(scores, pool: CandidatePool) -> DetectionResult:
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(pool) or len(pool) == 0:
        raise ValueError("need one score per candidate in a non-empty pool")
    predicted = int(np.argmax(scores))  # first maximum wins ties
    return DetectionResult(scores, predicted, predicted in pool.positive_indices)


def detect_sounding_object(smap: SimilarityMap, pool: CandidatePool, map_index: int = 0) -> DetectionResult:
    """Mean pixel score under each candidate mask (at the map's frame); empty masks score -inf."""
    pixels = smap.pixels[map_index]
    frame = smap.frames[map_index]
    scores = []
    for cand in pool.candidates:
        m = as_mask(cand)
        if m.shape[1:] != pixels.shape:
            raise ValueError("candidate mask extents do not match the similarity map")
        m = m[min(frame, m.shape[0] - 1)]
        scores.append(pixels[m].mean() if m.any() else -np.inf)
    return detect_from_scores(scores, pool)


def top1_accuracy(results: Sequence[DetectionResult]) -> float:
    if not results:
        raise ValueError("no detection results")
    return sum(r.hit for r in results) / len(results)


def eval_frame(sample: SyntheticSample) -> int:
    """The single frame used for detection: the middle one."""
    return sample.patches.shape[0] // 2


def evaluate_detection(
    params: EncoderParams, samples: Sequence[SyntheticSample], height: int, width: int, patch_size: int
) -> list[DetectionResult]:
    """Run the detection protocol on every sounding sample."""
    results = []
    for s in samples:
        if not s.sounding:
            continue
        t = eval_frame(s)
        patches = encode_visual(s.patches[t], params)
        e_a = encode_audio(s.audio, params)
        smap = similarity_map(patches, e_a, height, width, patch_size, frames=[t])
        results.append(detect_sounding_object(smap, s.pool))
    return results


def vision_only_baseline(predicted_masks: Sequence, gts: Sequence, threshold: float = 0.85) -> bool:
    """Hit iff some (prediction, ground truth) pair reaches the IoU threshold."""
    if len(predicted_masks) > 2:
        raise ValueError("the vision-only baseline uses at most two predicted masks")
    return any(mask_iou(p, g) >= threshold for p in predicted_masks for g in gts)


# -- ROC / PR ------------------------------------------------------------------

@dataclass
class AucResult:
    area: float
    thresholds: np.ndarray  # distinct scores, descending
    x: np.ndarray  # FPR for ROC, recall for PR
    y: np.ndarray  # TPR for ROC, precision for PR


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("need at least one positive and one negative label")
    return scores, labels


def _cumulative_counts(scores, labels):
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(l)[last_of_group]
    fp = np.cumsum(~l)[last_of_group]
    return s[last_of_group], tp, fp


def auc_roc(scores, labels) -> AucResult:
    """ROC area as the Mann-Whitney statistic (tied pairs count 1/2)."""
    scores, labels = _check_binary(scores, labels)
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    ranks = rankdata(scores)  # average ranks for ties
    area = (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    thr, tp, fp = _cumulative_counts(scores, labels)
    return AucResult(float(area), thr, np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos])


def auc_pr(scores, labels) -> AucResult:
    """Step-wise average precision: sum over thresholds of precision times recall gained."""
    scores, labels = _check_binary(scores, labels)
    n_pos = labels.sum()
    thr, tp, fp = _cumulative_counts(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    area = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return AucResult(area, thr, recall, precision)


# -- discovery -----------------------------------------------------------------

def embed_samples(params: EncoderParams, samples: Sequence[SyntheticSample], patch_size: int, theta=0.5, use_masks=True):
    """Unit vision, audio and language embeddings for each sample (object-aware pooling)."""
    vis, aud, lang = [], [], []
    for s in samples:
        grid = s.objectness(patch_size) if use_masks else np.ones(s.patches.shape[:2])
        vis.append(object_aware_pool(encode_visual(s.patches, params), grid, theta).embedding)
        aud.append(encode_audio(s.audio, params))
        lang.append(encode_language(s.narration, params))
    return np.array(vis), np.array(aud), np.array(lang)


def discovery_scores(vision, audio, language) -> dict[str, np.ndarray]:
    return {"AV": np.sum(audio * vision, axis=1), "AL": np.sum(audio * language, axis=1)}


def discovery_eval(
    params: EncoderParams, samples: Sequence[SyntheticSample], patch_size: int, theta=0.5, use_masks=True
) -> dict[str, dict[str, AucResult]]:
    """AUC-ROC and AUC-PR of the AV and AL cosines against the sounding flag."""
    v, a, l = embed_samples(params, samples, patch_size, theta, use_masks)
    labels = np.array([s.sounding for s in samples])
    return {
        pair: {"roc": auc_roc(sc, labels), "pr": auc_pr(sc, labels)}
        for pair, sc in discovery_scores(v, a, l).items()
    }


def background_similarity(
    params: EncoderParams, samples: Sequence[SyntheticSample], patch_size: int, theta=0.5, beta=50.0, seed=0
) -> float:
    """Mean cosine between audio and background-pooled visual embeddings (samples with background only)."""
    keep = [s for s in samples if len(background_indices(s.objectness(patch_size), theta))]
    if not keep:
        raise ValueError("no sample has background patches")
    patches = np.stack([s.patches for s in keep])
    obj = np.stack([s.objectness(patch_size) for s in keep])
    seeds = np.random.SeedSequence(seed).spawn(len(keep))
    sel = background_selection(obj, theta, beta, seeds)
    fwd = forward_batch(params, patches, obj, np.stack([s.audio for s in keep]), None, theta, sel)
    return float(np.mean(np.sum(fwd.audio.embedding * fwd.visual.background, axis=1)))


# -- clustering ------------------------------------------------------------------

def cosine_distances(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    unit = x / np.linalg.norm(x, axis=1, keepdims=True)
    return np.clip(1.0 - unit @ unit.T, 0.0, 2.0)


@dataclass
class Clustering:
    labels: np.ndarray
    merges: list[tuple[int, int, float]]  # (kept slot, absorbed slot, linkage distance)


def agglomerative_cluster(embeddings, k: int = 20) -> Clustering:
    """Average-linkage agglomeration under cosine distance down to k clusters.

    A cluster is identified by its lowest member index; among equally close
    pairs the lexicographically lowest (i, j) merges first, and j is folded
    into i.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if k < 1 or n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    d = cosine_distances(x)
    np.fill_diagonal(d, np.inf)
    sizes = np.ones(n)
    alive = np.ones(n, dtype=bool)
    owner = np.arange(n)
    merges = []
    for _ in range(n - k):
        flat = int(np.argmin(np.triu(d, 1) + np.tril(np.full((n, n), np.inf))))
        i, j = divmod(flat, n)
        merges.append((i, j, float(d[i, j])))
        # Lance-Williams update for average linkage
        row = (sizes[i] * d[i] + sizes[j] * d[j]) / (sizes[i] + sizes[j])
        d[i, :] = row
        d[:, i] = row
        d[i, i] = np.inf
        d[j, :] = np.inf
        d[:, j] = np.inf
        sizes[i] += sizes[j]
        alive[j] = False
        owner[owner == j] = i
    slots = {s: c for c, s in enumerate(sorted(set(owner.tolist())))}
    return Clustering(np.array([slots[o] for o in owner]), merges)


# -- reports ---------------------------------------------------------------------

def write_records(path, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_pgm(path, pixels) -> None:
    """8-bit binary PGM with scores mapped affinely from [-1, 1] to [0, 255]."""
    p = np.asarray(pixels, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("expected a single (H, W) map")
    img = np.clip(np.rint((np.clip(p, -1, 1) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
