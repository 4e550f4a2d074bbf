"""Adam training loop, validation-based model selection, and evaluation reports."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .dataset import FrameSet, ImuNormalizer, normalize_imu
from .models import NUM_CLASSES, NetworkSpec, NamedParameters, build, logits
from .tensor import ContractError

log = logging.getLogger(__name__)

LOG_HEADER = ["iteration", "train_loss", "train_acc", "val_loss", "val_acc"]
CLASS_COLUMNS = ["Class 1", "Class 2", "Class 3", "Total"]


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: NamedParameters, grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, p in params.items():
        if name not in grads:
            raise ContractError(f"adam_step: no gradient for {name}")
        if grads[name].shape != p.shape:
            raise ContractError(f"adam_step: gradient for {name} has shape {grads[name].shape}, not {p.shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= (state.lr * step).astype(p.dtype)
    return params, state


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_iters: int = 1000
    val_interval: int = 500
    select: str = "loss"  # "loss" (lowest val loss) or "accuracy" (highest val accuracy)
    seed: int = 0
    lr: float = 1e-4
    log_path: str | Path | None = None
    eval_batch: int = 32
    # stop as soon as a validation pass reaches this accuracy (fraction)
    target_val_accuracy: float | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.val_interval < 1:
            raise ValueError("batch_size and val_interval must be >= 1")
        if self.select not in ("loss", "accuracy"):
            raise ValueError(f"select must be 'loss' or 'accuracy', not {self.select!r}")


@dataclass
class LogRow:
    iteration: int
    train_loss: float
    train_acc: float
    val_loss: float | None = None
    val_acc: float | None = None

    def cells(self) -> list[str]:
        def fmt(x):
            return "" if x is None else f"{x:.9g}"

        return [str(self.iteration), fmt(self.train_loss), fmt(self.train_acc), fmt(self.val_loss), fmt(self.val_acc)]


@dataclass
class TrainResult:
    params: NamedParameters
    log: list[LogRow]
    best_iteration: int
    normalizer: ImuNormalizer | None
    final_params: NamedParameters


def _network_inputs(spec: NetworkSpec, frames: FrameSet, normalizer: ImuNormalizer | None):
    imus = None
    if spec.variant == "fusion":
        imus = normalize_imu(frames.imus, normalizer).astype(np.float32)
    return imus


def network_scores(
    spec: NetworkSpec,
    params: NamedParameters,
    frames: FrameSet,
    normalizer: ImuNormalizer | None = None,
    batch: int = 32,
) -> np.ndarray:
    """Softmax probabilities for every frame, N x 3."""
    imus = _network_inputs(spec, frames, normalizer)
    out = []
    for s in range(0, len(frames), batch):
        sl = slice(s, s + batch)
        z = logits(spec, params, frames.float_images(sl), None if imus is None else imus[sl])
        out.append(T.softmax(z).data)
    return np.concatenate(out)


def _loss_acc(probs: np.ndarray, idx: np.ndarray) -> tuple[float, float]:
    p = np.clip(probs[np.arange(len(idx)), idx], T.LOG_CLAMP, 1.0)
    return float(-np.log(p.astype(np.float64)).mean()), float((probs.argmax(axis=1) == idx).mean())


def train(
    spec: NetworkSpec,
    train_set: FrameSet,
    config: TrainConfig,
    val_set: FrameSet | None = None,
    params: NamedParameters | None = None,
) -> TrainResult:
    """Mini-batch Adam on the batch-mean cross-entropy.

    Shuffles once per epoch from ``config.seed``; the last batch of an epoch
    may be short.  When a validation set is given, the parameters from the
    best validation pass (per ``config.select``) are returned; ties keep the
    earlier pass.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if val_set is not None and len(val_set) == 0:
        raise ValueError("validation set is empty")
    params = build(spec, config.seed) if params is None else {k: v.copy() for k, v in params.items()}
    normalizer = ImuNormalizer.fit(train_set.imus) if spec.variant == "fusion" else None
    train_imus = _network_inputs(spec, train_set, normalizer)
    onehot = np.eye(NUM_CLASSES, dtype=np.float32)[train_set.class_indices]
    val_idx = val_set.class_indices if val_set is not None else None

    state = AdamState(lr=config.lr)
    rng = np.random.default_rng([config.seed, 1])
    order = np.empty(0, dtype=np.int64)
    cursor = 0
    rows: list[LogRow] = []
    best = {k: v.copy() for k, v in params.items()}
    best_score = None
    best_iter = 0
    writer = _LogWriter(config.log_path)
    try:
        for it in range(1, config.max_iters + 1):
            if cursor >= len(order):
                order = rng.permutation(len(train_set))
                cursor = 0
            idx = order[cursor : cursor + config.batch_size]
            cursor += len(idx)

            tape = T.Tape()
            watched = {k: tape.watch(k, v) for k, v in params.items()}
            z = logits(spec, watched, train_set.float_images(idx), None if train_imus is None else train_imus[idx])
            loss = T.softmax_cross_entropy(z, onehot[idx])
            grads = T.backprop(tape, loss)
            batch_acc = float((z.data.argmax(axis=1) == onehot[idx].argmax(axis=1)).mean())
            del tape, watched, z
            adam_step(params, grads, state)

            row = LogRow(it, float(loss.data), batch_acc)
            if val_set is not None and (it % config.val_interval == 0 or it == config.max_iters):
                probs = network_scores(spec, params, val_set, normalizer, config.eval_batch)
                row.val_loss, row.val_acc = _loss_acc(probs, val_idx)
                score = -row.val_loss if config.select == "loss" else row.val_acc
                if best_score is None or score > best_score:
                    best_score, best_iter = score, it
                    best = {k: v.copy() for k, v in params.items()}
                log.info("iter %d  train loss %.4f  val loss %.4f  val acc %.4f", it, row.train_loss, row.val_loss, row.val_acc)
            rows.append(row)
            writer.write(row)
            if (
                config.target_val_accuracy is not None
                and row.val_acc is not None
                and row.val_acc >= config.target_val_accuracy
            ):
                break
    finally:
        writer.close()
    if val_set is None:
        best, best_iter = {k: v.copy() for k, v in params.items()}, len(rows)
    return TrainResult(best, rows, best_iter, normalizer, params)


class _LogWriter:
    def __init__(self, path):
        self.fh = None
        if path is not None:
            self.fh = open(path, "w", newline="")
            self.csv = csv.writer(self.fh, lineterminator="\n")
            self.csv.writerow(LOG_HEADER)

    def write(self, row: LogRow) -> None:
        if self.fh is not None:
            self.csv.writerow(row.cells())

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def write_log(path, rows: list[LogRow]) -> None:
    w = _LogWriter(path)
    for r in rows:
        w.write(r)
    w.close()


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows: true class, columns: predicted class

    @classmethod
    def from_predictions(cls, true_idx, pred_idx) -> EvalReport:
        true_idx, pred_idx = np.asarray(true_idx), np.asarray(pred_idx)
        if len(true_idx) == 0:
            raise ValueError("cannot evaluate an empty dataset")
        cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
        np.add.at(cm, (true_idx, pred_idx), 1)
        return cls(cm)

    @property
    def counts(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    @property
    def positives(self) -> np.ndarray:
        return np.diag(self.confusion).copy()

    @property
    def negatives(self) -> np.ndarray:
        return self.counts - self.positives

    @property
    def class_accuracy(self) -> np.ndarray:
        """Percent correct per class (nan for a class with no samples)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return 100.0 * self.positives / self.counts

    @property
    def total_accuracy(self) -> float:
        return 100.0 * np.trace(self.confusion) / self.confusion.sum()

    @property
    def trivial_guess(self) -> float:
        """Accuracy of always answering the most frequent class, percent."""
        return 100.0 * self.counts.max() / self.counts.sum()

    def table(self) -> list[list[str]]:
        def pct(x):
            return f"{x:.2f}"

        c, p, n = self.counts, self.positives, self.negatives
        return [
            ["Result", *CLASS_COLUMNS],
            ["Testing Data", *map(str, c), str(c.sum())],
            ["Testing Positive", *map(str, p), str(p.sum())],
            ["Testing Negative", *map(str, n), str(n.sum())],
            ["Testing Accuracy", *map(pct, self.class_accuracy), pct(self.total_accuracy)],
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerows(self.table())
        w.writerow([])
        w.writerow(["Confusion", "Pred Class 1", "Pred Class 2", "Pred Class 3"])
        for i, row in enumerate(self.confusion):
            w.writerow([f"True Class {i + 1}", *map(str, row)])
        w.writerow([])
        w.writerow(["Trivial Guess", f"{self.trivial_guess:.2f}"])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())


Classifier = Callable[[FrameSet], np.ndarray]


def evaluate(classifier: Classifier, frames: FrameSet) -> EvalReport:
    """Run ``classifier`` (frames -> predicted class indices) and tabulate the results."""
    if len(frames) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    pred = np.asarray(classifier(frames))
    return EvalReport.from_predictions(frames.class_indices, pred)


def network_classifier(
    spec: NetworkSpec, params: NamedParameters, normalizer: ImuNormalizer | None = None, batch: int = 32
) -> Classifier:
    def classify(frames: FrameSet) -> np.ndarray:
        return network_scores(spec, params, frames, normalizer, batch).argmax(axis=1)

    return classify
