"""Optimization loop, metrics, and the missing-modality evaluation protocol.

Training follows the fixed recipe: SGD with momentum and coupled weight
decay, cross-entropy (classification) or L1 (regression) loss, seeded
shuffling, per-sample modality dropout, reduce-on-plateau learning rate, and
best-validation checkpointing. Everything is deterministic given (config,
seed).

Evaluation applies one corruption setting at a time (AV, A, V, NA, NV) to a
frozen model in eval mode and reports the task metric per setting. `M` is the
exact arithmetic mean over the AV/A/V settings; when noise settings are
evaluated the analogous mean over AV/NA/NV is reported as `M_noise`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Sample, stack_batch
from .dropout import DropoutPolicy, apply_mode, apply_test_setting, assign_modes
from .fusion import FusionModel
from .rng import Rng
from .tensor import Tape, Tensor, absolute, backward, log_softmax, mean as t_mean, mul, reduce_sum, scale


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses and metrics


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax logits."""
    n, classes = logits.shape
    onehot = np.eye(classes)[np.asarray(labels, dtype=int)]
    picked = reduce_sum(mul(log_softmax(logits, axis=-1), Tensor(onehot)))
    return scale(picked, -1.0 / n)


def l1_loss(pred: Tensor, targets: np.ndarray) -> Tensor:
    """Mean absolute error for (B, 1) or (B,) predictions."""
    t = np.asarray(targets, dtype=np.float64).reshape(pred.shape)
    return t_mean(absolute(pred - Tensor(t)))


def metrics(kind: str, preds: np.ndarray, labels: np.ndarray) -> float:
    """categorical: argmax accuracy; binary: sign agreement (zero labels
    excluded); mae: mean absolute error."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if kind == "categorical":
        if len(preds) != len(labels):
            raise ValueError(f"length mismatch: {len(preds)} preds vs {len(labels)} labels")
        if len(labels) < 1:
            raise ValueError("metrics need at least one sample")
        return float(np.mean(np.argmax(preds, axis=-1) == labels))
    scores = preds.reshape(-1)
    if len(scores) != len(labels):
        raise ValueError(f"length mismatch: {len(scores)} preds vs {len(labels)} labels")
    if len(labels) < 1:
        raise ValueError("metrics need at least one sample")
    if kind == "binary":
        mask = labels != 0
        if not mask.any():
            raise ValueError("binary accuracy undefined: all labels are zero")
        return float(np.mean(np.sign(scores[mask]) == np.sign(labels[mask])))
    if kind == "mae":
        return float(np.mean(np.abs(scores - labels)))
    raise ValueError(f"unknown metric kind {kind!r}")


def count_zero_labels(labels: np.ndarray) -> int:
    return int(np.sum(np.asarray(labels) == 0))


# ---------------------------------------------------------------------------
# optimizer and scheduler


class Sgd:
    """SGD with momentum and coupled weight decay:
    v <- momentum * v + (grad + weight_decay * w); w <- w - lr * v."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match "
                                 f"parameter {name!r} shape {p.data.shape}")
            v = self.momentum * self.velocity[name] + (g + self.weight_decay * p.data)
            self.velocity[name] = v
            p.data = p.data - self.lr * v


class PlateauScheduler:
    """Multiply lr by `factor` after `patience` epochs without improvement."""

    def __init__(self, lr: float, mode: str = "max", patience: int = 10,
                 factor: float = 0.1, tol: float = 1e-4):
        if mode not in ("max", "min"):
            raise ValueError(f"mode must be max or min, got {mode!r}")
        self.lr = lr
        self.mode = mode
        self.patience = patience
        self.factor = factor
        self.tol = tol
        self.best: float | None = None
        self.bad_epochs = 0

    def improved(self, metric: float) -> bool:
        if self.best is None:
            return True
        if self.mode == "max":
            return metric > self.best + self.tol
        return metric < self.best - self.tol

    def step(self, metric: float) -> float:
        if self.improved(metric):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    """Metric values per corruption setting plus their exact means."""

    label: str
    metric_names: tuple[str, ...]
    values: dict = field(default_factory=dict)    # setting -> metric -> value
    means: dict = field(default_factory=dict)     # "M" / "M_noise" -> metric -> value
    excluded_zero_labels: int = 0


def _predict(model: FusionModel, samples: list[Sample], batch_size: int = 256) -> np.ndarray:
    outs = []
    for lo in range(0, len(samples), batch_size):
        audio, vision, _ = stack_batch(samples[lo:lo + batch_size])
        outs.append(model.forward(audio, vision, training=False).data)
    return np.concatenate(outs, axis=0)


def evaluate(model: FusionModel, samples: list[Sample], settings: tuple[str, ...] = ("AV", "A", "V"),
             seed: int = 0, label: str = "") -> EvalReport:
    """Frozen-model evaluation under each requested corruption setting."""
    if not samples:
        raise ValueError("evaluate needs a non-empty split")
    task = model.cfg.task
    metric_names = ("acc",) if task == "classification" else ("bacc", "mae")
    report = EvalReport(label=label, metric_names=metric_names)
    labels = np.array([s.label for s in samples])
    if task == "regression":
        report.excluded_zero_labels = count_zero_labels(labels)

    noise_root = Rng(seed).split("eval_noise")
    for setting in settings:
        corrupted = [apply_test_setting(s, setting, noise_root.split(setting, i))
                     for i, s in enumerate(samples)]
        preds = _predict(model, corrupted)
        if task == "classification":
            report.values[setting] = {"acc": metrics("categorical", preds, labels)}
        else:
            report.values[setting] = {"bacc": metrics("binary", preds, labels),
                                      "mae": metrics("mae", preds, labels)}

    for mean_name, triple in (("M", ("AV", "A", "V")), ("M_noise", ("AV", "NA", "NV"))):
        if all(s in report.values for s in triple):
            report.means[mean_name] = {
                m: (report.values[triple[0]][m] + report.values[triple[1]][m]
                    + report.values[triple[2]][m]) / 3.0
                for m in metric_names
            }
    return report


def val_metric_of(report: EvalReport) -> float:
    """Scalar used for plateau scheduling and model selection."""
    if "acc" in report.metric_names:
        return report.values["AV"]["acc"]
    return report.values["AV"]["mae"]


# ---------------------------------------------------------------------------
# training loop


@dataclass
class OptimConfig:
    lr: float = 0.04
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    plateau_tol: float = 1e-4


@dataclass
class TrainResult:
    history: list          # rows of (epoch, train_loss, val_metric, lr)
    best_state: dict       # model arrays at the best validation epoch
    best_metric: float


def train(model: FusionModel, dataset: Dataset, policy: DropoutPolicy,
          optim: OptimConfig, seed: int = 0) -> TrainResult:
    """Train with per-sample modality dropout; returns history and the
    best-validation parameter snapshot. Raises TrainingDiverged on a
    non-finite loss, naming the epoch and batch."""
    train_split = dataset.splits["train"]
    val_split = dataset.splits["val"]
    task = model.cfg.task
    opt = Sgd(model.params(), optim.lr, optim.momentum, optim.weight_decay)
    sched = PlateauScheduler(optim.lr, mode="max" if task == "classification" else "min",
                             patience=optim.plateau_patience, factor=optim.plateau_factor,
                             tol=optim.plateau_tol)
    root = Rng(seed).split("train_loop")

    history = []
    best_state = model.state()
    best_metric = None
    higher_better = task == "classification"

    for epoch in range(optim.epochs):
        erng = root.split("epoch", epoch)
        order = erng.permutation(len(train_split))
        loss_sum = 0.0
        for bi, lo in enumerate(range(0, len(order), optim.batch_size)):
            idx = order[lo:lo + optim.batch_size]
            batch = [train_split[int(i)] for i in idx]
            brng = erng.split("batch", bi)
            modes = assign_modes(len(batch), policy, brng.split("modes"))
            batch = [apply_mode(s, m, brng.split("noise", i))
                     for i, (s, m) in enumerate(zip(batch, modes))]
            audio, vision, labels = stack_batch(batch)

            opt.zero_grad()
            with Tape():
                out = model.forward(audio, vision, training=True)
                loss = cross_entropy(out, labels) if task == "classification" \
                    else l1_loss(out, labels)
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise TrainingDiverged(
                        f"non-finite loss {loss_value} at epoch {epoch} batch {bi}")
                backward(loss)
            opt.lr = sched.lr
            opt.step()
            loss_sum += loss_value * len(batch)

        train_loss = loss_sum / len(train_split) if train_split else float("nan")
        val = val_metric_of(evaluate(model, val_split, ("AV",), seed=seed)) if val_split \
            else float("nan")
        history.append((epoch, train_loss, val, sched.lr))
        if val_split:
            if best_metric is None or (val > best_metric if higher_better else val < best_metric):
                best_metric = val
                best_state = model.state()
            sched.step(val)
        else:
            best_state = model.state()

    return TrainResult(history, best_state, best_metric if best_metric is not None else float("nan"))


def save_history(history: list, path):
    lines = ["epoch,train_loss,val_metric,lr"]
    for epoch, loss, val, lr in history:
        lines.append(f"{epoch},{loss:.17g},{val:.17g},{lr:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_history(path) -> list:
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            epoch, loss, val, lr = line.strip().split(",")
            rows.append((int(epoch), float(loss), float(val), float(lr)))
    return rows
