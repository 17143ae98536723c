"""Online adaptation engine.

Assembles the three-term objective (weighted pseudo-label cross-entropy,
cross-view consistency, feature alignment), performs plain gradient
steps, and decides per sample how many adaptation cycles to run. The
stream loops run strictly sequentially with batch size 1; the delayed
variant predicts first and adapts in windows.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .audiomap import MappingResult
from .model import VideoClassifier, VideoClip, ViewSet, predict, predict_probs, sample_views
from .stats import TestStatsTracker, TrainStats, align_loss

CYCLE_MODES = ("flexible", "fixed", "none")


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator per (seed, purpose, index) so code paths that
    consume different amounts of randomness stay comparable across runs."""
    return np.random.default_rng([int(seed)] + [int(k) for k in key])


@dataclass
class AdaptConfig:
    lr: float
    alpha: float = 0.1
    beta: float = 0.1
    tau: int = 8
    num_views: int = 2
    momentum_stats: float = 0.1
    delay_window: int = 0  # 0 = adapt immediately after each sample
    theta: float = 0.3
    top_k: int = 10
    use_select: bool = False
    use_ensemble: bool = False
    reset_per_run: bool = True
    cycle_mode: str = "flexible"

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.num_views < 2:
            raise ValueError("num_views must be >= 2")
        if not 0.0 < self.momentum_stats <= 1.0:
            raise ValueError("momentum_stats must be in (0, 1]")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must be in [0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.delay_window < 0:
            raise ValueError("delay_window must be >= 0")
        if self.cycle_mode not in CYCLE_MODES:
            raise ValueError(f"cycle_mode must be one of {CYCLE_MODES}")


@dataclass
class StepLosses:
    cls: float
    cons: float
    align: float
    total: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cls, self.cons, self.align, self.total)


@dataclass
class CycleState:
    """Trace carried between cycles: steps taken and the previous losses."""

    t: int
    prev_cons: Optional[float]
    prev_align: Optional[float]
    view_argmaxes: list[int]


@dataclass
class AdaptationRecord:
    sample_id: str
    steps_used: int
    loss_trace: list[tuple[float, float, float, float]]
    pseudo_used: bool
    pred_before: int
    pred_after: int
    aborted: bool = False

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "steps_used": self.steps_used,
                "loss_trace": [list(t) for t in self.loss_trace],
                "pseudo_used": self.pseudo_used, "pred_before": self.pred_before,
                "pred_after": self.pred_after, "aborted": self.aborted}


def cls_loss(view_predictions: Sequence[ad.Tensor], pseudo: int) -> ad.Tensor:
    """Cross-entropy against the pseudo label, summed over the views."""
    if not view_predictions:
        raise ValueError("need at least one view prediction")
    total = ad.cross_entropy(view_predictions[0], pseudo)
    for pred in view_predictions[1:]:
        total = ad.add(total, ad.cross_entropy(pred, pseudo))
    return total


def cons_loss(view_predictions: Sequence[ad.Tensor]) -> ad.Tensor:
    """L1 spread of each view's prediction around the mean prediction."""
    m = len(view_predictions)
    if m < 2:
        raise ValueError("consistency needs at least two views")
    acc = view_predictions[0]
    for pred in view_predictions[1:]:
        acc = ad.add(acc, pred)
    mean_pred = ad.scale(acc, 1.0 / m)
    total = ad.l1_distance(view_predictions[0], mean_pred)
    for pred in view_predictions[1:]:
        total = ad.add(total, ad.l1_distance(pred, mean_pred))
    return total


def _as_tensor(v) -> ad.Tensor:
    return v if isinstance(v, ad.Tensor) else ad.constant(np.asarray(float(v)))


def total_loss(cls: Optional[ad.Tensor], cons, align, alpha: float, beta: float) -> ad.Tensor:
    """alpha * cls + beta * cons + align, with the cls term dropped when no
    pseudo label exists. Evaluated left to right for reproducible floats."""
    cons, align = _as_tensor(cons), _as_tensor(align)
    weighted_cons = ad.scale(cons, beta)
    if cls is None:
        return ad.add(weighted_cons, align)
    return ad.add(ad.add(ad.scale(_as_tensor(cls), alpha), weighted_cons), align)


def should_continue(state: CycleState, cur_cons: float, cur_align: float,
                    view_argmaxes: Sequence[int], tau: int) -> bool:
    """Continue iff under the cycle cap and at least one signal fires:
    strictly decreasing consistency loss, strictly decreasing alignment
    loss, or any two views predicting different classes."""
    if state.t >= tau:
        return False
    cons_down = state.prev_cons is not None and cur_cons < state.prev_cons
    align_down = state.prev_align is not None and cur_align < state.prev_align
    disagree = len(set(view_argmaxes)) > 1
    return cons_down or align_down or disagree


@dataclass
class _Eval:
    tape: ad.Tape
    total: ad.Tensor
    losses: StepLosses
    argmaxes: list[int]


def _evaluate(model: VideoClassifier, views: ViewSet, pseudo: Optional[int],
              train_stats: TrainStats, tracker: TestStatsTracker,
              config: AdaptConfig) -> _Eval:
    with ad.Tape() as tape:
        records = [model.forward(v) for v in views.views]
        tracker.update(records)
        preds = [rec.prediction for rec in records]
        cons = cons_loss(preds)
        align = align_loss(tracker, train_stats)
        cls = cls_loss(preds, pseudo) if pseudo is not None else None
        total = total_loss(cls, cons, align, config.alpha, config.beta)
    losses = StepLosses(cls=cls.item() if cls is not None else 0.0,
                        cons=cons.item(), align=align.item(), total=total.item())
    argmaxes = [int(np.argmax(p.array)) for p in preds]
    return _Eval(tape=tape, total=total, losses=losses, argmaxes=argmaxes)


def _apply(model: VideoClassifier, ev: _Eval, lr: float) -> None:
    model.zero_grad()
    ev.tape.backward(ev.total)
    model.sgd_step(lr)


def adapt_step(model: VideoClassifier, views: ViewSet, pseudo: Optional[int],
               train_stats: TrainStats, tracker: TestStatsTracker,
               config: AdaptConfig) -> tuple[StepLosses, list[int]]:
    """One adaptation cycle: forward the views, fold the tracker, take a
    gradient step. Returns the losses measured before the update.

    Raises NonFiniteError without touching the parameters if the loss is
    not finite; callers flag the sample.
    """
    ev = _evaluate(model, views, pseudo, train_stats, tracker, config)
    if not np.isfinite(ev.losses.total):
        raise ad.NonFiniteError(f"non-finite loss {ev.losses.total}")
    _apply(model, ev, config.lr)
    return ev.losses, ev.argmaxes


def adapt_sample(model: VideoClassifier, clip: VideoClip, pseudo: Optional[int],
                 train_stats: TrainStats, tracker: TestStatsTracker,
                 config: AdaptConfig, rng: np.random.Generator,
                 views: Optional[ViewSet] = None) -> AdaptationRecord:
    """Adapt on one sample for as many cycles as the controller allows.

    In flexible mode the first step always runs; afterwards each cycle is
    evaluated first and the loss comparison uses the previous cycle's
    pre-update measurement (the first comparison's baseline is the first
    step's own pre-update forward). Fixed mode runs exactly tau cycles;
    none mode runs one.
    """
    if views is None:
        views = sample_views(clip, config.num_views, rng)
    pred_before = predict(model, clip)
    trace: list[StepLosses] = []
    aborted = False
    try:
        losses, _ = adapt_step(model, views, pseudo, train_stats, tracker, config)
        trace.append(losses)
        prev = losses
        t = 1
        if config.cycle_mode == "fixed":
            while t < config.tau:
                losses, _ = adapt_step(model, views, pseudo, train_stats, tracker, config)
                trace.append(losses)
                t += 1
        elif config.cycle_mode == "flexible":
            while t < config.tau:
                ev = _evaluate(model, views, pseudo, train_stats, tracker, config)
                if not np.isfinite(ev.losses.total):
                    raise ad.NonFiniteError(f"non-finite loss {ev.losses.total}")
                state = CycleState(t=t, prev_cons=prev.cons, prev_align=prev.align,
                                   view_argmaxes=ev.argmaxes)
                if not should_continue(state, ev.losses.cons, ev.losses.align,
                                       ev.argmaxes, config.tau):
                    break
                _apply(model, ev, config.lr)
                trace.append(ev.losses)
                prev = ev.losses
                t += 1
    except ad.NonFiniteError:
        aborted = True
    pred_after = predict(model, clip)
    return AdaptationRecord(sample_id=clip.sample_id, steps_used=len(trace),
                            loss_trace=[l.as_tuple() for l in trace],
                            pseudo_used=pseudo is not None,
                            pred_before=pred_before, pred_after=pred_after,
                            aborted=aborted)


def select_filter(pseudo: int, video_prediction: np.ndarray, k: int) -> bool:
    """True iff the pseudo class sits among the k most probable classes.

    Equal probabilities rank in index order, so the lower index occupies
    the earlier slot.
    """
    probs = np.asarray(video_prediction)
    if k > probs.shape[0]:
        raise ValueError(f"k={k} exceeds {probs.shape[0]} classes")
    ranked = np.argsort(-probs, kind="stable")
    return int(pseudo) in ranked[:k]


def ensemble_predict(video_prediction: np.ndarray, pseudo: Optional[int],
                     theta: float, k: int) -> int:
    """Emit the pseudo label instead of the argmax only when the model is
    unsure (max probability below theta) and the pseudo label is in the
    top-k; otherwise keep the visual prediction."""
    probs = np.asarray(video_prediction)
    if pseudo is not None and float(probs.max()) < theta and select_filter(pseudo, probs, k):
        return int(pseudo)
    return int(np.argmax(probs))


Mapper = Callable[[VideoClip], Optional[MappingResult]]


@dataclass
class RunResult:
    records: list[AdaptationRecord]
    predictions: list[int]
    correct: int
    total: int
    pseudo_valid: int
    mean_adapt_seconds: float

    @property
    def accuracy_pct(self) -> float:
        return 100.0 * self.correct / self.total if self.total else 0.0

    @property
    def pseudo_valid_rate(self) -> float:
        return self.pseudo_valid / self.total if self.total else 0.0

    def steps_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for rec in self.records:
            hist[rec.steps_used] = hist.get(rec.steps_used, 0) + 1
        return dict(sorted(hist.items()))


def _resolve_pseudo(clip: VideoClip, mapper: Optional[Mapper], available: bool) -> tuple[Optional[int], bool]:
    if mapper is None or not available:
        return None, False
    mapping = mapper(clip)
    if mapping is None or not mapping.valid or mapping.class_index is None:
        return None, False
    return int(mapping.class_index), True


def run_online(model: VideoClassifier, samples: Iterable[VideoClip], *,
               config: AdaptConfig, train_stats: TrainStats,
               mapper: Optional[Mapper] = None, availability: float = 100.0,
               seed: int = 0) -> RunResult:
    """Adapt-then-predict over the stream, carrying model and tracker state.

    Each sample is mapped to a pseudo label (withheld with probability
    1 - availability%), optionally gated by the select filter, adapted,
    and then predicted with visual data only (optionally ensembled).
    """
    tracker = TestStatsTracker.for_model(model, config.momentum_stats,
                                         layers=train_stats.layer_ids)
    records: list[AdaptationRecord] = []
    predictions: list[int] = []
    correct = total = pseudo_valid = 0
    adapt_seconds = 0.0
    for i, clip in enumerate(samples):
        available = derive_rng(seed, 22, i).random() * 100.0 < availability
        pseudo, valid = _resolve_pseudo(clip, mapper, available)
        pseudo_valid += valid
        if pseudo is not None and config.use_select and \
                not select_filter(pseudo, predict_probs(model, clip), config.top_k):
            pseudo = None
        t0 = time.perf_counter()
        rec = adapt_sample(model, clip, pseudo, train_stats, tracker, config,
                           derive_rng(seed, 11, i))
        adapt_seconds += time.perf_counter() - t0
        records.append(rec)
        if config.use_ensemble:
            final = ensemble_predict(predict_probs(model, clip), pseudo,
                                     config.theta, config.top_k)
        else:
            final = rec.pred_after  # same deterministic view, same parameters
        predictions.append(final)
        total += 1
        if clip.ground_truth is not None and final == clip.ground_truth:
            correct += 1
    return RunResult(records=records, predictions=predictions, correct=correct,
                     total=total, pseudo_valid=pseudo_valid,
                     mean_adapt_seconds=adapt_seconds / total if total else 0.0)


def run_delayed(model: VideoClassifier, samples: Iterable[VideoClip], *,
                config: AdaptConfig, train_stats: TrainStats,
                mapper: Optional[Mapper] = None, availability: float = 100.0,
                seed: int = 0) -> RunResult:
    """Predict-then-adapt with a window of ``config.delay_window`` samples.

    Every sample is classified immediately with the current parameters;
    once the window fills, the buffered samples drive adaptation in
    arrival order and the buffer clears. Predictions never use the
    ensemble strategy because pseudo labels arrive only at the flush.
    A trailing partial window is left unflushed: no later prediction
    could observe its effect.
    """
    if config.delay_window < 1:
        raise ValueError("run_delayed needs delay_window >= 1")
    tracker = TestStatsTracker.for_model(model, config.momentum_stats,
                                         layers=train_stats.layer_ids)
    records: list[AdaptationRecord] = []
    predictions: list[int] = []
    correct = total = pseudo_valid = 0
    adapt_seconds = 0.0
    buffer: list[tuple[int, VideoClip, Optional[int]]] = []
    for i, clip in enumerate(samples):
        probs = predict_probs(model, clip)
        final = int(np.argmax(probs))
        predictions.append(final)
        total += 1
        if clip.ground_truth is not None and final == clip.ground_truth:
            correct += 1
        available = derive_rng(seed, 22, i).random() * 100.0 < availability
        pseudo, valid = _resolve_pseudo(clip, mapper, available)
        pseudo_valid += valid
        buffer.append((i, clip, pseudo))
        if len(buffer) == config.delay_window:
            for j, bclip, bpseudo in buffer:
                if bpseudo is not None and config.use_select and \
                        not select_filter(bpseudo, predict_probs(model, bclip), config.top_k):
                    bpseudo = None
                t0 = time.perf_counter()
                rec = adapt_sample(model, bclip, bpseudo, train_stats, tracker,
                                   config, derive_rng(seed, 11, j))
                adapt_seconds += time.perf_counter() - t0
                records.append(rec)
            buffer.clear()
    return RunResult(records=records, predictions=predictions, correct=correct,
                     total=total, pseudo_valid=pseudo_valid,
                     mean_adapt_seconds=adapt_seconds / total if total else 0.0)
