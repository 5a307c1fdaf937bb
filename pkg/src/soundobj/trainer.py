"""Three-stage training driver: align, refine, finetune.

Randomness is derived from a single root seed per purpose (initialization,
batch order, background sampling), so a run is fully determined by the
dataset and the config.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .encoders import EncoderParams, save_checkpoint
from .losses import ConsensusConfig, stage_loss
from .model import background_selection, backward_batch, forward_batch
from .synthworld import SyntheticSample

log = logging.getLogger(__name__)

STAGES = ("align", "refine", "finetune")
_STAGE_IDS = {s: i for i, s in enumerate(STAGES)}
_INIT, _BATCH, _BACKGROUND = 11, 12, 13


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    align_epochs: int = 5
    refine_epochs: int = 5
    finetune_epochs: int = 5
    batch_size: int = 16
    lr: float = 5e-5
    finetune_lr: float | None = None  # None: same as lr
    tau: float = 0.07
    theta: float = 0.5
    beta: float = 50.0
    anchor: str = "audio"
    alpha_vision: float = 0.5
    alpha_language: float = 1.0
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dim: int = 32
    hidden: int = 0  # 0: same as dim
    layers: int = 2
    use_masks: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.align_epochs, self.refine_epochs, self.finetune_epochs) < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.lr < 0 or (self.finetune_lr is not None and self.finetune_lr < 0):
            raise ValueError("learning rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def epochs(self, stage: str) -> int:
        return getattr(self, f"{stage}_epochs")

    def stage_lr(self, stage: str) -> float:
        return self.finetune_lr if stage == "finetune" and self.finetune_lr is not None else self.lr

    @property
    def consensus(self) -> ConsensusConfig:
        others = [m for m in ("vision", "language", "audio") if m != self.anchor]
        alphas = {"vision": self.alpha_vision, "language": self.alpha_language, "audio": 1.0}
        return ConsensusConfig(self.anchor, tuple((m, alphas[m]) for m in others), self.tau)

    def init_params(self, input_dims: Mapping[str, int]) -> EncoderParams:
        seed = np.random.SeedSequence([self.seed, _INIT])
        return EncoderParams.init(input_dims, self.dim, self.hidden or None, self.layers, seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "TrainConfig":
        """Build from string or typed values, coercing to each field's type."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = coerce_value(raw, fields[key].default)
        return cls(**kwargs)


def coerce_value(raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or default is None:
        return float(text)
    return text


def parse_flat_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, blank lines are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_flat_config(path) -> dict[str, str]:
    return parse_flat_config(Path(path).read_text())


@dataclass
class TrainingArrays:
    """Samples stacked into dense arrays for fast minibatching."""

    patches: np.ndarray  # (S, T, N, F)
    objectness: np.ndarray  # (S, T, N)
    audio: np.ndarray
    narration: np.ndarray
    sounding: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[SyntheticSample], patch_size: int, use_masks: bool = True):
        if not samples:
            raise ValueError("empty dataset")
        patches = np.stack([s.patches for s in samples])
        if use_masks:
            obj = np.stack([s.objectness(patch_size) for s in samples])
        else:
            obj = np.ones(patches.shape[:3])
        return cls(
            patches,
            obj,
            np.stack([s.audio for s in samples]),
            np.stack([s.narration for s in samples]),
            np.array([s.sounding for s in samples]),
        )

    def __len__(self):
        return len(self.patches)

    @property
    def input_dims(self) -> dict[str, int]:
        return {"vision": self.patches.shape[-1], "audio": self.audio.shape[-1], "language": self.narration.shape[-1]}


def make_batches(n: int, batch_size: int, seed) -> list[np.ndarray]:
    """Shuffle 0..n-1 and chunk; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    order = np.random.default_rng(seed).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], names: Sequence[str]):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in names:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arrays[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, arrays, grads, names):
        for name in names:
            if name in grads:
                arrays[name] -= self.lr * grads[name]


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    mean_loss: float
    steps: int
    max_grad_norm: float

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str | None = None

    def losses(self, stage: str) -> list[float]:
        return [r.mean_loss for r in self.records if r.stage == stage]

    def extend(self, other: "TrainReport"):
        self.records.extend(other.records)
        self.wall_time += other.wall_time
        self.checkpoint = other.checkpoint or self.checkpoint


def _epoch_seed(config: TrainConfig, stage: str, epoch: int, purpose: int):
    return np.random.SeedSequence([config.seed, purpose, _STAGE_IDS[stage], epoch])


def train_step(params: EncoderParams, data: TrainingArrays, idx: np.ndarray, stage: str, config: TrainConfig, bg_seed=None):
    """Loss and parameter gradients for one minibatch."""
    background = None
    if stage == "finetune":
        root = bg_seed if isinstance(bg_seed, np.random.SeedSequence) else np.random.SeedSequence(bg_seed)
        seeds = root.spawn(len(idx))
        background = background_selection(data.objectness[idx], config.theta, config.beta, seeds)
    narration = None if stage == "finetune" else data.narration[idx]
    fwd = forward_batch(params, data.patches[idx], data.objectness[idx], data.audio[idx], narration, config.theta, background)
    out = stage_loss(stage, fwd.embeddings(), config.consensus)
    grads, _ = backward_batch(params, fwd, out.grads)
    return out, grads


def run_stage(
    data: TrainingArrays,
    params: EncoderParams,
    config: TrainConfig,
    stage: str,
) -> tuple[EncoderParams, TrainReport]:
    """Train one stage on a copy of ``params``; returns the updated copy and per-epoch records."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if len(data) == 0:
        raise ValueError("empty dataset")
    params = params.copy()
    arrays = params.named_arrays()
    names = params.trainable_names()
    lr = config.stage_lr(stage)
    opt = Adam(lr, config.adam_beta1, config.adam_beta2, config.adam_eps) if config.optimizer == "adam" else SGD(lr)
    report = TrainReport()
    start = time.perf_counter()
    for epoch in range(1, config.epochs(stage) + 1):
        batches = make_batches(len(data), config.batch_size, _epoch_seed(config, stage, epoch, _BATCH))
        bg_root = _epoch_seed(config, stage, epoch, _BACKGROUND)
        bg_seeds = bg_root.spawn(len(batches))
        total, max_norm = 0.0, 0.0
        for b, idx in enumerate(batches):
            out, grads = train_step(params, data, idx, stage, config, bg_seeds[b])
            if not np.isfinite(out.value):
                raise TrainingError(f"non-finite loss in stage {stage}, epoch {epoch}, batch {b}")
            norm = float(np.sqrt(sum(np.sum(g * g) for n, g in grads.items() if n in names)))
            if not np.isfinite(norm):
                raise TrainingError(f"non-finite gradient in stage {stage}, epoch {epoch}, batch {b}")
            max_norm = max(max_norm, norm)
            total += out.value
            opt.step(arrays, grads, names)
        rec = EpochRecord(stage, epoch, total / len(batches), len(batches), max_norm)
        log.info("%s epoch %d: loss %.5f", stage, epoch, rec.mean_loss)
        report.records.append(rec)
    report.wall_time = time.perf_counter() - start
    return params, report


def run_pipeline(
    pretrain: TrainingArrays,
    finetune: TrainingArrays | None,
    config: TrainConfig,
    out_dir=None,
    params: EncoderParams | None = None,
    stages: Sequence[str] = STAGES,
) -> tuple[dict[str, EncoderParams], TrainReport]:
    """Run the requested stages in order, checkpointing after each one.

    align and refine use ``pretrain``; finetune uses ``finetune``. Returns
    the parameters after every stage run plus the combined report.
    """
    stages = [s for s in STAGES if s in stages]
    if params is None:
        params = config.init_params(pretrain.input_dims)
    out = {}
    report = TrainReport()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    for stage in stages:
        data = finetune if stage == "finetune" else pretrain
        if data is None:
            raise ValueError(f"stage {stage} needs a dataset")
        params, rep = run_stage(data, params, config, stage)
        if out_path is not None:
            ckpt = out_path / f"{stage}.ckpt"
            save_checkpoint(ckpt, params, stage, config.epochs(stage))
            rep.checkpoint = str(ckpt)
        out[stage] = params
        report.extend(rep)
    if out_path is not None:
        write_metrics(out_path / "metrics.jsonl", report)
    return out, report


def write_metrics(path, report: TrainReport):
    with open(path, "w") as fh:
        for rec in report.records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
