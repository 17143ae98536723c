"""Per-layer feature statistics: source-side reference moments, a test-time
EMA tracker, and the L1 alignment loss between the two."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .model import ForwardRecord, VideoClassifier, VideoClip, deterministic_view


@dataclass
class TrainStats:
    """Per-channel mean and population variance pooled over the source set."""

    layer_ids: list[str]
    mean: dict[str, np.ndarray]
    var: dict[str, np.ndarray]

    def __post_init__(self):
        for lid in self.layer_ids:
            if lid not in self.mean or lid not in self.var:
                raise ValueError(f"missing statistics for layer {lid}")
            if self.mean[lid].shape != self.var[lid].shape:
                raise ValueError(f"mean/var length mismatch for layer {lid}")
            if np.any(self.var[lid] < 0):
                raise ValueError(f"negative variance for layer {lid}")


def compute_train_stats(model: VideoClassifier, dataset: Sequence[VideoClip],
                        layers: Optional[Sequence[str]] = None) -> TrainStats:
    """Pool per-channel moments over every position of every training clip.

    Uses the deterministic inference view of each clip, accumulating sums
    and squared sums so duplicated samples leave the result unchanged.
    """
    if not dataset:
        raise ValueError("cannot compute statistics over an empty dataset")
    layer_ids = list(layers) if layers is not None else model.layer_ids()
    unknown = set(layer_ids) - set(model.layer_ids())
    if unknown:
        raise ValueError(f"unknown layers: {sorted(unknown)}")
    positions = {lid: 0 for lid in layer_ids}
    sums = {lid: np.zeros(model.layer_width(lid)) for lid in layer_ids}
    sq_sums = {lid: np.zeros(model.layer_width(lid)) for lid in layer_ids}
    order = {lid: i for i, lid in enumerate(model.layer_ids())}
    for clip in dataset:
        rec = model.forward(deterministic_view(clip))
        for lid in layer_ids:
            fmap = rec.layer_activations[order[lid]].array
            flat = fmap.reshape(fmap.shape[0], -1)
            positions[lid] += flat.shape[1]
            sums[lid] += flat.sum(axis=1)
            sq_sums[lid] += (flat * flat).sum(axis=1)
    mean = {lid: sums[lid] / positions[lid] for lid in layer_ids}
    var = {lid: np.maximum(sq_sums[lid] / positions[lid] - mean[lid] ** 2, 0.0)
           for lid in layer_ids}
    return TrainStats(layer_ids=layer_ids, mean=mean, var=var)


@dataclass
class TestStatsTracker:
    """Running per-layer moments over the test stream.

    ``update`` pools the current sample's views into batch moments, blends
    them into the running estimate with the configured momentum, and keeps
    the blended values as differentiable tensors in ``current``. Gradient
    flows only through the current batch; history enters as a constant.
    """

    __test__ = False  # not a pytest class, despite the name

    layer_ids: list[str]
    momentum: float = 0.1
    layer_positions: Optional[dict[str, int]] = None
    count: int = 0
    running_mean: dict[str, np.ndarray] = field(default_factory=dict)
    running_var: dict[str, np.ndarray] = field(default_factory=dict)
    current: dict[str, tuple[ad.Tensor, ad.Tensor]] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError("momentum must be in (0, 1]")
        if self.layer_positions is None:
            self.layer_positions = {lid: i for i, lid in enumerate(self.layer_ids)}

    @classmethod
    def for_model(cls, model: VideoClassifier, momentum: float = 0.1,
                  layers: Optional[Sequence[str]] = None) -> "TestStatsTracker":
        layer_ids = list(layers) if layers is not None else model.layer_ids()
        positions = {lid: model.layer_ids().index(lid) for lid in layer_ids}
        return cls(layer_ids=layer_ids, momentum=momentum, layer_positions=positions)

    def update(self, records: Sequence[ForwardRecord]) -> "TestStatsTracker":
        """Fold the views' pooled batch moments into the running estimate."""
        if not records:
            raise ValueError("tracker update needs at least one forward record")
        m = self.momentum
        for lid in self.layer_ids:
            pos = self.layer_positions[lid]
            try:
                fmaps = [rec.layer_activations[pos] for rec in records]
            except IndexError as exc:
                raise ValueError(f"records lack activations for layer {lid}") from exc
            stacked = fmaps[0] if len(fmaps) == 1 else ad.concat(fmaps, axis=1)
            batch_mean, batch_var = ad.mean_var(stacked)
            if self.count == 0:
                cur_mean, cur_var = batch_mean, batch_var
            else:
                cur_mean = ad.add(ad.constant((1.0 - m) * self.running_mean[lid]),
                                  ad.scale(batch_mean, m))
                cur_var = ad.add(ad.constant((1.0 - m) * self.running_var[lid]),
                                 ad.scale(batch_var, m))
            self.current[lid] = (cur_mean, cur_var)
            self.running_mean[lid] = cur_mean.array.copy()
            self.running_var[lid] = cur_var.array.copy()
        self.count += 1
        return self

    def snapshot(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {lid: (self.running_mean[lid].copy(), self.running_var[lid].copy())
                for lid in self.layer_ids if lid in self.running_mean}

    def clone(self) -> "TestStatsTracker":
        c = TestStatsTracker(layer_ids=list(self.layer_ids), momentum=self.momentum,
                             layer_positions=dict(self.layer_positions or {}))
        c.count = self.count
        c.running_mean = {k: v.copy() for k, v in self.running_mean.items()}
        c.running_var = {k: v.copy() for k, v in self.running_var.items()}
        return c


CurrentStats = Mapping[str, tuple[ad.Tensor, ad.Tensor]]


def align_loss(current: Union[TestStatsTracker, CurrentStats],
               train_stats: TrainStats) -> ad.Tensor:
    """Sum over layers of L1(mean, ref mean) + L1(var, ref var)."""
    if isinstance(current, TestStatsTracker):
        if not current.current:
            raise ValueError("tracker has no current statistics; call update first")
        stats = current.current
    else:
        stats = current
    if set(stats.keys()) != set(train_stats.layer_ids):
        raise ValueError(f"layer sets differ: {sorted(stats)} vs {train_stats.layer_ids}")
    total: Optional[ad.Tensor] = None
    for lid in train_stats.layer_ids:
        cur_mean, cur_var = stats[lid]
        term = ad.add(ad.l1_distance(cur_mean, ad.constant(train_stats.mean[lid])),
                      ad.l1_distance(cur_var, ad.constant(train_stats.var[lid])))
        total = term if total is None else ad.add(total, term)
    assert total is not None
    return total


def save_train_stats(stats: TrainStats, path: str | Path) -> None:
    doc = {"layers": stats.layer_ids,
           "stats": {lid: {"mean": stats.mean[lid].tolist(),
                           "var": stats.var[lid].tolist()}
                     for lid in stats.layer_ids}}
    Path(path).write_text(json.dumps(doc))


def load_train_stats(path: str | Path) -> TrainStats:
    doc = json.loads(Path(path).read_text())
    layer_ids = list(doc["layers"])
    mean = {lid: np.asarray(doc["stats"][lid]["mean"], dtype=np.float64) for lid in layer_ids}
    var = {lid: np.asarray(doc["stats"][lid]["var"], dtype=np.float64) for lid in layer_ids}
    return TrainStats(layer_ids=layer_ids, mean=mean, var=var)
