"""Mini-batch training with Adadelta and binary cross-entropy."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..nn import ops
from ..nn.tensor import Tape, Tensor, backward, no_grad
from .optim import AdadeltaState, adadelta_step

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0
    seed: int = 0


@dataclass
class TrainResult:
    model: object
    loss_trace: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    state: AdadeltaState | None = None


class LogisticModel:
    """Logistic regression on flat feature vectors; same interface as the DenseNet."""

    def __init__(self, n_features: int, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.weight = Tensor(rng.normal(0, 0.01, size=(1, n_features)), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(1), requires_grad=True, dtype=dtype)
        self.training = True

    def parameters(self):
        return [self.weight, self.bias]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def forward(self, batch: Tensor):
        x = batch if batch.ndim == 2 else batch.reshape(batch.shape[0], -1)
        return ops.sigmoid(ops.linear(x, self.weight, self.bias)), x

    __call__ = forward


def _as_batch(x: np.ndarray, model) -> np.ndarray:
    if isinstance(model, LogisticModel):
        return x
    # DenseNet input: add the channel axis to bare (N, D, H, W) stacks
    return x[:, None] if x.ndim == 4 else x


def predict(model, data: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Positive-class probabilities in eval mode."""
    data = np.asarray(data)
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(data), batch_size):
            probs, _ = model.forward(Tensor._wrap(_as_batch(data[i : i + batch_size], model)))
            out.append(probs.data.reshape(-1).astype(np.float64))
    if was_training:
        model.train()
    return np.concatenate(out) if out else np.zeros(0)


def recalibrate_batchnorm(model, data: np.ndarray, batch_size: int = 8) -> None:
    """Replace running statistics by a cumulative average over ``data`` at the current weights.

    The moving averages gathered during training lag behind the weights,
    which can leave eval-mode predictions far from train-mode ones.
    """
    norms = [st for _, st in model.norm_states()] if hasattr(model, "norm_states") else []
    if not norms:
        return
    data = np.asarray(data)
    saved = [st.momentum for st in norms]
    for st in norms:
        st.running_mean[:] = 0.0
        st.running_var[:] = 1.0
    was_training = model.training
    model.train()
    try:
        k = 0
        for start in range(0, len(data), batch_size):
            chunk = data[start : start + batch_size]
            if len(chunk) < 2:
                continue
            k += 1
            for st in norms:
                st.momentum = 1.0 / k
            model.forward(Tensor._wrap(_as_batch(chunk, model)))
    finally:
        for st, mom in zip(norms, saved):
            st.momentum = mom
        model.zero_grad()
        if not was_training:
            model.eval()


def accuracy(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    return float(np.mean((np.asarray(probs) >= threshold).astype(int) == np.asarray(labels)))


def train(
    model,
    data: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    state: AdadeltaState | None = None,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    tag: str = "train",
) -> TrainResult:
    """Minimize mean BCE over ``data`` with Adadelta; epoch order is shuffled by ``cfg.seed``."""
    data = np.asarray(data)
    labels = np.asarray(labels).astype(np.float64)
    if len(data) == 0:
        raise ValueError("train needs at least one sample")
    if len(data) != len(labels):
        raise ValueError(f"{len(data)} samples but {len(labels)} labels")
    params = model.parameters()
    if state is None:
        state = AdadeltaState.for_params(params, rho=cfg.rho, eps=cfg.eps, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model, state=state)
    model.train()
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            if len(idx) == 1 and n > 1:
                # a lone sample would give batch norm a degenerate batch; fold it into the next epoch
                continue
            batch = Tensor._wrap(_as_batch(data[idx], model))
            target = labels[idx].reshape(-1, 1)
            model.zero_grad()
            with Tape() as tape:
                probs, _ = model.forward(batch)
                loss = ops.bce_loss(probs, target)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, b, value)
            backward(loss, tape)
            adadelta_step(params, [p.grad for p in params], state)
            total += value * len(idx)
        result.loss_trace.append(total / n)
        msg = f"stage={tag} epoch={epoch + 1} loss={result.loss_trace[-1]:.6f}"
        if val is not None or epoch == cfg.epochs - 1:
            recalibrate_batchnorm(model, data, cfg.batch_size)
            model.train()
        if val is not None:
            acc = accuracy(predict(model, val[0]), val[1])
            result.val_accuracy.append(acc)
            msg += f" val_acc={acc:.4f}"
        log.info(msg)
    model.zero_grad()
    return result
