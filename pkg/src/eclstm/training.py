"""Loss, Adam, the budgeted training loop and the RUL evaluation metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
import threading
import time
import tracemalloc
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .autograd import Tensor, as_tensor, no_grad, zero_grads

log = logging.getLogger(__name__)

REPORT_FORMAT = "eclstm-report"
REPORT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""


class Dataset(Protocol):
    def __len__(self) -> int: ...
    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class ArrayDataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def batch(self, idx):
        return self.x[idx], self.y[idx]


@dataclass
class TrainSpec:
    epochs: int = 1
    batch_size: int = 512
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    report_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# -- loss and optimizer -----------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ValueError("empty batch")
    diff = pred - target
    return (diff * diff).mean()


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    rejected: int = 0

    @classmethod
    def zeros(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], moments: AdamState,
              t: int, spec: TrainSpec) -> bool:
    """Bias-corrected Adam update in place. Returns False (and skips) on non-finite gradients."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    if any(g is not None and not np.all(np.isfinite(g)) for g in grads):
        moments.rejected += 1
        return False
    b1, b2 = spec.beta1, spec.beta2
    corr1, corr2 = 1.0 - b1**t, 1.0 - b2**t
    for p, g, m, v in zip(params, grads, moments.m, moments.v):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= spec.lr * (m / corr1) / (np.sqrt(v / corr2) + spec.eps)
    moments.t = t
    return True


# -- training loop ------------------------------------------------------------------

@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    epoch: int = 0
    adam: AdamState | None = None
    history: list[dict] = field(default_factory=list)


def _epoch_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def estimate_step_memory(model, dataset: Dataset, batch_size: int) -> int:
    """Peak bytes of one training step at ``batch_size``, extrapolated from traced 2- and 4-example steps.

    Parameters and normalization statistics are restored; gradients are cleared.
    """
    params = model.parameters()
    saved = model.state_dict() if hasattr(model, "state_dict") else None
    with _TRACE_LOCK:
        peaks = _traced_peaks(model, dataset, params)
    zero_grads(params)
    if saved is not None:
        model.load_state_dict(saved)
    (k0, p0), (k1, p1) = peaks
    per_example = max(p1 - p0, 0) / max(k1 - k0, 1)
    return int(p0 + per_example * (batch_size - k0))


_TRACE_LOCK = threading.Lock()  # tracemalloc is process-global


def _traced_peaks(model, dataset, params) -> list[tuple[int, int]]:
    peaks = []
    for k in (2, 4):  # batch 1 carries one-off warm-up allocations
        k = min(k, len(dataset))
        x, y = dataset.batch(np.arange(k))
        zero_grads(params)
        tracemalloc.start()
        try:
            mse_loss(model.forward(x, train=True, rng=np.random.default_rng(0)), y).backward()
            peaks.append((k, tracemalloc.get_traced_memory()[1]))
        finally:
            tracemalloc.stop()
    return peaks


def predict(model, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            x, _ = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
            out.append(model.forward(x, train=False).data)
    return np.concatenate(out) if out else np.zeros(0)


def train_model(model, dataset: Dataset, spec: TrainSpec, val: Dataset | None = None,
                state: TrainState | None = None) -> TrainState:
    """Run ``spec.epochs`` more epochs of shuffled mini-batch Adam on MSE.

    Shuffling and dropout masks derive from (seed, epoch, batch), so training
    e1 epochs and then e2 more reproduces e1 + e2 epochs bit for bit.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("training set is empty")
    params = model.parameters()
    state = state or TrainState()
    if state.adam is None:
        state.adam = AdamState.zeros(params)
    for epoch in range(state.epoch, state.epoch + spec.epochs):
        t0 = time.perf_counter()
        order = _epoch_rng(spec.seed, epoch).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, spec.batch_size)):
            idx = order[start: start + spec.batch_size]
            x, y = dataset.batch(idx)
            zero_grads(params)
            loss = mse_loss(model.forward(x, train=True, rng=_epoch_rng(spec.seed, epoch, b)), y)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {b}")
            loss.backward()
            adam_step(params, [p.grad for p in params], state.adam, state.adam.t + 1, spec)
            total += loss.item() * len(idx)
        record = {"epoch": epoch + 1, "train_loss": total / n, "seconds": time.perf_counter() - t0}
        if val is not None and len(val):
            record["val_rmse"] = eval_rmse(val.batch(np.arange(len(val)))[1], predict(model, val))
        state.history.append(record)
        state.epoch = epoch + 1
        if spec.report_every and (epoch + 1) % spec.report_every == 0:
            log.info("epoch %d %s", epoch + 1, {k: round(v, 5) for k, v in record.items() if k != "epoch"})
    zero_grads(params)
    return state


# -- metrics ----------------------------------------------------------------------------

def _pair(truths, preds) -> tuple[np.ndarray, np.ndarray]:
    r, p = np.asarray(truths, dtype=float), np.asarray(preds, dtype=float)
    if r.shape != p.shape:
        raise ValueError(f"length mismatch: {r.shape} truths vs {p.shape} predictions")
    if r.size == 0:
        raise ValueError("no predictions to evaluate")
    return r, p


def eval_rmse(truths, preds) -> float:
    r, p = _pair(truths, preds)
    return float(np.sqrt(np.mean((p - r) ** 2)))


def eval_score(truths, preds) -> float:
    """Asymmetric exponential penalty; late predictions (pred > truth) cost more."""
    r, p = _pair(truths, preds)
    d = p - r
    return float(np.sum(np.where(d < 0, np.expm1(-d / 13.0), np.expm1(d / 10.0))))


def eval_percent_error(truths, preds) -> tuple[np.ndarray, float]:
    r, p = _pair(truths, preds)
    if np.any(r == 0):
        raise ValueError("actual RUL of zero has no percent error")
    er = np.abs(100.0 * (r - p) / r)
    return er, float(er.mean())


@dataclass
class EvalReport:
    rmse: float
    score: float
    unit_ids: list
    truths: list[float]
    preds: list[float]
    percent_errors: list[float] | None = None
    mean_percent_error: float | None = None
    wall_time: float = 0.0
    seed: int | None = None

    @classmethod
    def build(cls, unit_ids, truths, preds, wall_time: float = 0.0, seed=None,
              percent: bool = False) -> "EvalReport":
        r, p = _pair(truths, preds)
        er, mer = eval_percent_error(r, p) if percent else (None, None)
        return cls(eval_rmse(r, p), eval_score(r, p), list(np.asarray(unit_ids).tolist()),
                   r.tolist(), p.tolist(), None if er is None else er.tolist(), mer, wall_time, seed)

    def summary(self) -> dict:
        out = {"rmse": self.rmse, "score": self.score, "n_units": len(self.truths),
               "wall_time": self.wall_time, "seed": self.seed}
        if self.mean_percent_error is not None:
            out["mean_percent_error"] = self.mean_percent_error
        return out


def write_jsonl(path: str | Path, records: Sequence[dict], kind: str, version: str = "") -> None:
    """Line-oriented JSON with a self-describing header line."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": REPORT_FORMAT, "kind": kind, "version": REPORT_VERSION,
                             "tool_version": version}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_predictions(path: str | Path, unit_ids, truths, preds) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id", "true_rul", "pred_rul"])
        for u, r, p in zip(unit_ids, truths, preds):
            w.writerow([u, repr(float(r)), repr(float(p))])


def read_predictions(path: str | Path) -> tuple[list, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and "unit_id" not in rows[0]:
        raise ValueError(f"{path}: expected columns unit_id,true_rul,pred_rul")
    ids = [r["unit_id"] for r in rows]
    truths = np.array([float(r["true_rul"]) if r.get("true_rul") not in (None, "") else np.nan for r in rows])
    return ids, truths, np.array([float(r["pred_rul"]) for r in rows])
