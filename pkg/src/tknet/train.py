"""MAE training with Adam, early stopping on validation MAE, evaluation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, Tensor
from .data import Examples, Stats
from .utils import write_csv


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 5
    seed: int = 0
    loss: str = "mae"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.loss != "mae":
            raise ValueError(f"unsupported loss {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
              state: AdamState, cfg: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; a missing gradient counts as zero."""
    t = state.step + 1
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g
        m = cfg.beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - cfg.beta2) * g * g
        new_p[name] = p - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(t, new_m, new_v)


def mae_loss(pred: Tensor, y: np.ndarray) -> Tensor:
    return ad.abs_(pred - Tensor(np.asarray(y, dtype=np.float64))).mean()


class NonFiniteLossError(FloatingPointError):
    pass


def first_non_finite(root: Tensor, params: Parameters | None = None) -> str:
    """Name the earliest (forward order) graph node holding a non-finite value."""
    if params is not None:
        for name, p in params.items():
            if not np.all(np.isfinite(p.value)):
                return f"parameter {name}"
    for node in ad._topo_order(root):
        if not np.all(np.isfinite(node.value)):
            label = node.name or (f"leaf {node.shape}" if node.is_leaf else f"op '{node.op}' {node.shape}")
            return label
    return "loss"


def predict(model, ex: Examples, batch_size: int = 1024) -> np.ndarray:
    out = []
    for lo in range(0, len(ex), batch_size):
        part = ex.take(slice(lo, lo + batch_size))
        out.append(model.predict(part.x, part.t).value)
    return np.concatenate(out) if out else np.zeros(0)


def _mae(model, ex: Examples) -> float:
    return float(np.mean(np.abs(predict(model, ex) - ex.y)))


@dataclass
class TrainResult:
    history: list[tuple[int, float, float]]
    best_epoch: int
    best_val: float
    best_state: dict[str, np.ndarray]

    def write_history(self, path) -> None:
        write_csv(path, ["epoch", "train_loss", "val_mae"], self.history)


def train_loop(model, train: Examples, val: Examples, cfg: TrainConfig,
               history_path=None, checkpoint_path=None, meta: dict | None = None) -> TrainResult:
    """Minibatch Adam on MAE; stops after ``patience`` epochs without a val improvement.

    The model ends up holding the best-validation parameters.
    """
    params: Parameters = model.params
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history: list[tuple[int, float, float]] = []
    best_val, best_epoch = math.inf, 0
    best_state = params.state_dict()
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        losses, weights = [], []
        for lo in range(0, n, cfg.batch_size):
            batch = train.take(order[lo:lo + cfg.batch_size])
            params.zero_grad()
            loss = mae_loss(model.predict(batch.x, batch.t), batch.y)
            if not math.isfinite(loss.item()):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}; first non-finite tensor: {first_non_finite(loss, params)}")
            ad.backward(loss)
            cur = params.state_dict()
            grads = {k: p.grad for k, p in params.items()}
            new, state = adam_step(cur, grads, state, cfg)
            params.load_state_dict(new)
            losses.append(loss.item())
            weights.append(len(batch))
        train_loss = float(np.average(losses, weights=weights))
        val_mae = _mae(model, val)
        history.append((epoch, train_loss, val_mae))
        if val_mae < best_val:
            best_val, best_epoch = val_mae, epoch
            best_state = params.state_dict()
            if checkpoint_path is not None:
                ad.save_checkpoint(checkpoint_path, params, {**(meta or {}), "epoch": epoch, "val_mae": val_mae})
        elif epoch - best_epoch >= cfg.patience:
            break
    params.load_state_dict(best_state)
    result = TrainResult(history, best_epoch, best_val, best_state)
    if history_path is not None:
        result.write_history(history_path)
    return result


def evaluate(model, test: Examples, stats: Stats | None = None) -> float:
    """Test MAE in original units (targets and predictions de-normalized with ``stats``)."""
    pred = predict(model, test)
    y = test.y
    if stats is not None:
        pred, y = stats.invert(pred), stats.invert(y)
    return float(np.mean(np.abs(pred - y)))
