"""Supervised SGD fine-tuning driven by a validation-error learning-rate schedule.

Schedule strings
----------------
``D:<start>:<scale>:<decay_th>,<stop_th>:<max_epochs>``
    Train at ``start`` until the epoch-to-epoch drop in validation frame
    error (percentage points) falls below ``decay_th``; from then on multiply
    the rate by ``scale`` after every epoch, and stop once the drop falls
    below ``stop_th``.  Never run more than ``max_epochs`` epochs.
``C:<lr>:<epochs>``
    Constant rate for exactly ``epochs`` epochs.
"""
import dataclasses
import logging
import time
from typing import Callable, Iterable, List, Optional

import numpy as np

from .errors import DataError, DomainError, ParseError, TrainingError
from .network import INFER, TRAIN, Network, backward, cross_entropy, forward, predict
from .pfile import FrameTable, Partition
from .rng import SeededRng

log = logging.getLogger(__name__)

DECAY = "D"
CONSTANT = "C"
INITIAL = "initial"
DECAYING = "decaying"
STOPPED = "stopped"


@dataclasses.dataclass(frozen=True)
class LrSchedule:
    mode: str
    start_lr: float
    scale_by: float = 1.0
    decay_threshold: float = 0.0
    stop_threshold: float = 0.0
    max_epochs: int = 1

    def __post_init__(self):
        if self.mode not in (DECAY, CONSTANT):
            raise DomainError(f"unknown schedule mode {self.mode!r}")
        if not self.start_lr > 0:
            raise DomainError("start learning rate must be positive")
        if self.mode == DECAY and not 0 < self.scale_by < 1:
            raise DomainError("scale factor must lie in (0, 1)")
        if self.decay_threshold < 0 or self.stop_threshold < 0:
            raise DomainError("thresholds must be non-negative")
        if self.max_epochs < 1:
            raise DomainError("max epochs must be >= 1")


def _num(fields, i, cast=float):
    try:
        value = cast(fields[i])
    except ValueError:
        raise ParseError(f"lrate field {i} ({fields[i]!r}) is not a valid number") from None
    if cast is float and not np.isfinite(value):
        raise ParseError(f"lrate field {i} ({fields[i]!r}) is not finite")
    return value


def parse_lrate_spec(text) -> LrSchedule:
    fields = [f.strip() for f in str(text).strip().split(":")]
    mode = fields[0]
    if mode == DECAY:
        if len(fields) != 5:
            raise ParseError(
                f"'D' schedule needs 5 fields (D:start:scale:decay,stop:max), got {len(fields)}"
            )
        pair = fields[3].split(",")
        if len(pair) != 2:
            raise ParseError(f"lrate field 3 ({fields[3]!r}) must be '<decay>,<stop>'")
        try:
            dth, sth = float(pair[0]), float(pair[1])
        except ValueError:
            raise ParseError(f"lrate field 3 ({fields[3]!r}) is not a number pair") from None
        return LrSchedule(DECAY, _num(fields, 1), _num(fields, 2), dth, sth, _num(fields, 4, int))
    if mode == CONSTANT:
        if len(fields) != 3:
            raise ParseError(f"'C' schedule needs 3 fields (C:lr:epochs), got {len(fields)}")
        return LrSchedule(CONSTANT, _num(fields, 1), max_epochs=_num(fields, 2, int))
    raise ParseError(f"lrate field 0 ({mode!r}) must be 'D' or 'C'")


@dataclasses.dataclass
class TrainState:
    epoch: int = 0
    current_lr: float = 0.0
    phase: str = INITIAL
    error_history: List[float] = dataclasses.field(default_factory=list)

    @classmethod
    def start(cls, schedule: LrSchedule):
        return cls(0, schedule.start_lr, INITIAL, [])

    @property
    def stopped(self):
        return self.phase == STOPPED

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["epoch"]), float(d["current_lr"]), str(d["phase"]),
                   [float(e) for e in d["error_history"]])


def next_lr(schedule: LrSchedule, state: TrainState) -> TrainState:
    """Advance the schedule after an epoch whose validation error is ``error_history[-1]``."""
    history = state.error_history
    epoch = len(history)
    if state.phase == STOPPED:
        return dataclasses.replace(state, error_history=list(history))
    lr, phase = state.current_lr, state.phase
    if epoch >= schedule.max_epochs:
        phase = STOPPED
    elif schedule.mode == DECAY and epoch >= 2:
        improvement = history[-2] - history[-1]
        if phase == INITIAL:
            if improvement < schedule.decay_threshold:
                phase = DECAYING
                lr *= schedule.scale_by
        elif improvement < schedule.stop_threshold:
            phase = STOPPED
        else:
            lr *= schedule.scale_by
    return TrainState(epoch, lr, phase, list(history))


@dataclasses.dataclass
class EpochStats:
    train_xent: float
    train_fer: float
    valid_fer: Optional[float] = None
    wall_time: float = 0.0
    frames: int = 0

    def log_line(self, epoch, lr):
        return (f"epoch {epoch} lr {lr:.6g} train-xent {self.train_xent:.6f} "
                f"train-fer {self.train_fer:.4f}% valid-fer {self.valid_fer:.4f}%")


class MemorySource:
    """In-memory stand-in for :class:`kpdnn.pfile.PFileSource`."""

    def __init__(self, features, labels, partition_frames=None, random=False):
        n = len(labels)
        self.table = FrameTable(np.zeros(n), np.arange(n), features, labels)
        self.partition_frames = partition_frames or max(n, 1)
        self.random = random

    def partitions(self, rng=None, shuffle=None):
        shuffle = self.random if shuffle is None else shuffle
        for ordinal, start in enumerate(range(0, len(self.table), self.partition_frames)):
            frames = self.table.take(slice(start, start + self.partition_frames))
            if shuffle and len(frames) > 1:
                frames = frames.take(rng.permutation(len(frames)))
            yield Partition(ordinal, frames)


def _frames_of(item):
    if isinstance(item, Partition):
        return item.frames
    if isinstance(item, FrameTable):
        return item
    x, y = item
    y = np.asarray(y)
    return FrameTable(np.zeros(len(y)), np.arange(len(y)), x, y)


def _iter_tables(data):
    if isinstance(data, (FrameTable, tuple)):
        return [_frames_of(data)]
    if hasattr(data, "partitions"):
        return (p.frames for p in data.partitions(None, shuffle=False))
    return (_frames_of(item) for item in data)


def _check_labels(frames: FrameTable, num_targets):
    if frames.labels is None:
        raise DataError("training data carries no labels")
    bad = np.flatnonzero((frames.labels < 0) | (frames.labels >= num_targets))
    if len(bad):
        i = bad[0]
        raise DataError(
            f"record utt {frames.utt[i]} frame {frames.frame[i]} has label {frames.labels[i]}, "
            f"network has {num_targets} targets"
        )


def sgd_epoch(net: Network, data: Iterable, lr, batch_size, rng: SeededRng) -> EpochStats:
    """One pass of minibatch SGD over every partition in ``data``."""
    if batch_size < 1:
        raise DomainError("batch size must be >= 1")
    t0 = time.perf_counter()
    total_xent = 0.0
    errors = 0
    frames_seen = 0
    for part in data:
        frames = _frames_of(part)
        _check_labels(frames, net.output_dim)
        x, y = frames.features, frames.labels
        for start in range(0, len(frames), batch_size):
            xb, yb = x[start:start + batch_size], y[start:start + batch_size]
            cache = forward(net, xb, TRAIN, rng)
            xent = cross_entropy(cache.posteriors, yb)
            if not np.isfinite(xent):
                raise TrainingError("training cross-entropy became non-finite")
            total_xent += xent * len(yb)
            errors += int(np.sum(cache.posteriors.argmax(axis=1) != yb))
            frames_seen += len(yb)
            if lr != 0:
                net.apply_update(backward(net, cache, yb), lr)
    if frames_seen == 0:
        raise DomainError("training data is empty")
    if not all(np.all(np.isfinite(p)) for p in net.parameters()):
        raise TrainingError("parameters became non-finite")
    return EpochStats(total_xent / frames_seen, 100.0 * errors / frames_seen,
                      wall_time=time.perf_counter() - t0, frames=frames_seen)


def evaluate(net: Network, data, batch_size=4096) -> float:
    """Frame error rate (percent) in infer mode."""
    total = 0
    errors = 0
    for frames in _iter_tables(data):
        if frames.labels is None:
            raise DataError("evaluation data carries no labels")
        if len(frames) == 0:
            continue
        post = predict(net, frames.features, batch_size)
        errors += int(np.sum(post.argmax(axis=1) != frames.labels))
        total += len(frames)
    if total == 0:
        raise DomainError("evaluation data is empty")
    return 100.0 * errors / total


def fine_tune(net: Network, train, valid, schedule: LrSchedule, rng: SeededRng, batch_size=256,
              state: Optional[TrainState] = None, on_epoch: Optional[Callable] = None,
              emit: Callable[[str], None] = print) -> TrainState:
    """Run epochs until the schedule stops.

    ``train`` / ``valid`` expose ``partitions(rng, shuffle=None)`` (a
    :class:`~kpdnn.pfile.PFileSource` or :class:`MemorySource`).  Passing a
    ``state`` restored from a checkpoint resumes where that run left off;
    ``on_epoch(net, state, stats)`` runs after each epoch's schedule update.
    """
    if state is None:
        state = TrainState.start(schedule)
        emit(f"initial valid-fer {evaluate(net, valid):.4f}%")
    while not state.stopped:
        lr = state.current_lr
        stats = sgd_epoch(net, train.partitions(rng), lr, batch_size, rng)
        stats.valid_fer = evaluate(net, valid)
        state = next_lr(schedule, dataclasses.replace(
            state, error_history=state.error_history + [stats.valid_fer]))
        emit(stats.log_line(state.epoch, lr))
        if on_epoch is not None:
            on_epoch(net, state, stats)
    return state
