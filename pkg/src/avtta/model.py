"""A small instrumented video classifier with segment-based view sampling.

The network applies a per-frame, per-position channel projection followed
by row RMS normalization and ReLU in each block, then average-pools the
last block's feature map over all positions and classifies with a linear
head. Every block's post-activation feature map is captured in channel-
first layout so the statistics module can align per-layer moments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad

SEGMENTS = 16  # frames per sampled view; clips are split into this many segments


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    layer_widths: tuple[int, ...]
    input_shape: tuple[int, int, int, int]  # (t, h, w, c_in) consumed per view
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if not self.layer_widths or any(w < 1 for w in self.layer_widths):
            raise ValueError("layer widths must all be >= 1")
        if len(self.input_shape) != 4 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"bad input shape {self.input_shape}")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "layer_widths": list(self.layer_widths),
            "input_shape": list(self.input_shape),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            num_classes=int(d["num_classes"]),
            layer_widths=tuple(int(w) for w in d["layer_widths"]),
            input_shape=tuple(int(v) for v in d["input_shape"]),
            seed=int(d["seed"]),
        )


@dataclass
class VideoClip:
    """Raw clip pixels in [0, 1] plus identity and (hidden) ground truth.

    ``ground_truth`` is never consulted by adaptation; it exists for
    accuracy accounting and for the synthetic audio oracle.
    """

    frames: np.ndarray  # (t_total, h, w, c_in)
    sample_id: str
    ground_truth: Optional[int] = None

    def __post_init__(self):
        self.frames = np.ascontiguousarray(np.asarray(self.frames, dtype=np.float64))
        if self.frames.ndim != 4:
            raise ValueError(f"clip must be rank 4, got {self.frames.shape}")
        if self.frames.shape[0] < SEGMENTS:
            raise ValueError(f"clip needs >= {SEGMENTS} frames, got {self.frames.shape[0]}")
        lo, hi = float(self.frames.min()), float(self.frames.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0, 1]: min={lo}, max={hi}")

    @property
    def t_total(self) -> int:
        return self.frames.shape[0]


@dataclass
class ViewSet:
    """M frame-sampled views of one clip, forwarded jointly."""

    views: list[np.ndarray]  # each (SEGMENTS, h, w, c_in)
    frame_indices: list[list[int]]

    def __post_init__(self):
        if len(self.views) < 2:
            raise ValueError("need at least 2 views for cross-view terms")
        if len(self.frame_indices) != len(self.views):
            raise ValueError("one index list per view required")
        for idx in self.frame_indices:
            if len(idx) != SEGMENTS or any(i < 0 for i in idx):
                raise ValueError("each view samples 16 nonnegative frame indices")

    @property
    def num_views(self) -> int:
        return len(self.views)


@dataclass
class ForwardRecord:
    prediction: ad.Tensor  # probability vector over classes
    layer_activations: list[ad.Tensor]  # each (c_l, t_l, h_l, w_l)


def _segment_indices(t_total: int, start: int) -> list[int]:
    seg = t_total // SEGMENTS
    return [start + k * seg for k in range(SEGMENTS)]


def sample_views(clip: VideoClip, num_views: int, rng: np.random.Generator) -> ViewSet:
    """Sample ``num_views`` 16-frame views: one frame per equal segment.

    The start offset is drawn uniformly in the first segment and reused
    as a constant stride, so indices are start + k * floor(t_total / 16).
    """
    if clip.t_total < SEGMENTS:
        raise ValueError(f"clip too short for sampling: {clip.t_total} frames")
    if num_views < 2:
        raise ValueError("num_views must be >= 2")
    seg = clip.t_total // SEGMENTS
    views, indices = [], []
    for _ in range(num_views):
        start = int(rng.integers(0, seg))
        idx = _segment_indices(clip.t_total, start)
        views.append(np.ascontiguousarray(clip.frames[idx]))
        indices.append(idx)
    return ViewSet(views=views, frame_indices=indices)


def deterministic_view(clip: VideoClip) -> np.ndarray:
    """The inference-time view: start offset 0 in every segment."""
    return np.ascontiguousarray(clip.frames[_segment_indices(clip.t_total, 0)])


class VideoClassifier:
    """Stacked 1x1-projection blocks with capture of per-layer activations."""

    def __init__(self, config: ModelConfig):
        self.config = config
        t, h, w, c_in = config.input_shape
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, ad.Tensor] = {}
        prev = c_in
        for i, width in enumerate(config.layer_widths, start=1):
            bound = np.sqrt(1.0 / prev)
            self.params[f"block{i}.w"] = ad.parameter(rng.uniform(-bound, bound, (width, prev)))
            self.params[f"block{i}.b"] = ad.parameter(rng.uniform(-bound, bound, width))
            prev = width
        bound = np.sqrt(1.0 / prev)
        self.params["head.w"] = ad.parameter(rng.uniform(-bound, bound, (config.num_classes, prev)))
        self.params["head.b"] = ad.parameter(rng.uniform(-bound, bound, config.num_classes))

    def layer_ids(self) -> list[str]:
        return [f"block{i}" for i in range(1, len(self.config.layer_widths) + 1)]

    def layer_width(self, layer_id: str) -> int:
        return self.config.layer_widths[int(layer_id.removeprefix("block")) - 1]

    def parameters(self) -> list[tuple[str, ad.Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for _, p in self.params.items():
            p.zero_grad()

    def sgd_step(self, lr: float) -> None:
        for _, p in self.params.items():
            if p.grad_array is not None:
                p.array = p.array - lr * p.grad_array

    def copy(self) -> "VideoClassifier":
        clone = VideoClassifier(self.config)
        for name, p in self.params.items():
            clone.params[name] = ad.parameter(p.array.copy())
        return clone

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.array.copy() for name, p in self.params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            self.params[name] = ad.parameter(np.asarray(arr, dtype=np.float64))

    def forward(self, view: np.ndarray) -> ForwardRecord:
        """Run one view through the blocks; capture each block's activations.

        The pass is pure: nothing on the model mutates. Recording on a
        tape happens only when the caller opened one.
        """
        t, h, w, c_in = self.config.input_shape
        view = np.asarray(view, dtype=np.float64)
        if view.shape != (t, h, w, c_in):
            raise ad.ShapeError(f"view shape {view.shape} != {(t, h, w, c_in)}")
        x = ad.reshape(ad.constant(view), (t * h * w, c_in))
        activations: list[ad.Tensor] = []
        width = c_in
        for i in range(1, len(self.config.layer_widths) + 1):
            x = ad.linear(x, self.params[f"block{i}.w"], self.params[f"block{i}.b"])
            x = ad.rms_norm(x)
            x = ad.relu(x)
            width = self.config.layer_widths[i - 1]
            fmap = ad.permute(ad.reshape(x, (t, h, w, width)), (3, 0, 1, 2))
            activations.append(fmap)
        pooled = ad.channel_mean(activations[-1])
        logits = ad.linear(pooled, self.params["head.w"], self.params["head.b"])
        return ForwardRecord(prediction=ad.softmax(logits), layer_activations=activations)


def predict_probs(model: VideoClassifier, clip: VideoClip) -> np.ndarray:
    """Probability vector for the deterministic inference view (no tape)."""
    return model.forward(deterministic_view(clip)).prediction.array


def predict(model: VideoClassifier, clip: VideoClip) -> int:
    """Visual-only class decision; ties break toward the lowest index."""
    return int(np.argmax(predict_probs(model, clip)))


def train_source(model: VideoClassifier, dataset: list[VideoClip], epochs: int,
                 lr: float, rng: np.random.Generator) -> tuple[VideoClassifier, float]:
    """Plain per-sample gradient descent on cross-entropy over clean clips.

    Returns the model (mutated in place) and its final training accuracy.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    for clip in dataset:
        if clip.ground_truth is None or not 0 <= clip.ground_truth < model.config.num_classes:
            raise ValueError(f"clip {clip.sample_id} lacks a valid label")
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        for j in order:
            clip = dataset[int(j)]
            seg = clip.t_total // SEGMENTS
            start = int(rng.integers(0, seg))
            view = clip.frames[_segment_indices(clip.t_total, start)]
            with ad.Tape() as tape:
                rec = model.forward(view)
                loss = ad.cross_entropy(rec.prediction, clip.ground_truth)
            model.zero_grad()
            tape.backward(loss)
            model.sgd_step(lr)
    correct = sum(predict(model, clip) == clip.ground_truth for clip in dataset)
    return model, correct / len(dataset)


CHECKPOINT_FORMAT = "avtta-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: VideoClassifier, path: str | Path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": {name: p.array.reshape(-1).tolist() for name, p in model.params.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> VideoClassifier:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint file: {path}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    model = VideoClassifier(ModelConfig.from_dict(doc["config"]))
    for name, p in model.params.items():
        flat = np.asarray(doc["params"][name], dtype=np.float64)
        if flat.size != p.array.size:
            raise ValueError(f"parameter {name} has wrong size in checkpoint")
        model.params[name] = ad.parameter(flat.reshape(p.array.shape))
    return model
