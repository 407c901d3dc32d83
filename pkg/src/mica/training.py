"""Window-sampled training with step-decayed Adam and early stopping.

Loss is mean absolute error in the original data units (the backbone
de-standardizes before returning), validated every ``val_check_every``
steps on a fixed tiling of the validation split.  The best-validation
parameters are restored before test metrics are computed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import ForecastModel
from .data import ConfigError, PanelDataset
from .tensor import ShapeError, Tensor, finite_checks, no_grad, tabs


class TrainingDivergedError(RuntimeError):
    """Loss became NaN/Inf; carries the offending step index."""

    def __init__(self, step: int):
        super().__init__(f"non-finite training loss at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    windows_batch: int = 64
    max_steps: int = 12000
    val_check_every: int = 500
    lr0: float = 1e-3
    lr_decay: float = 0.5
    lr_step: int = 4000
    early_stop_patience: int = 20
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)

    def __post_init__(self):
        if min(self.windows_batch, self.max_steps, self.val_check_every,
               self.lr_step, self.early_stop_patience) < 1:
            raise ConfigError("training sizes must be positive")
        if self.lr0 <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("need lr0 > 0 and 0 < lr_decay <= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")


@dataclass
class TrainReport:
    seed: int
    best_step: int
    best_val_mae: float
    test_mae: float
    test_rmse: float
    steps_run: int
    train_trace: list[tuple[int, float]] = field(default_factory=list)
    val_trace: list[tuple[int, float]] = field(default_factory=list)


# -- metrics -------------------------------------------------------------------

def mae(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"metric shapes differ: {y_true.shape} vs "
                         f"{y_pred.shape}")
    return float(np.mean(np.abs(y_true - y_pred)))


def rmse(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"metric shapes differ: {y_true.shape} vs "
                         f"{y_pred.shape}")
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


def mae_loss(y_true: np.ndarray, y_pred: Tensor) -> Tensor:
    """Differentiable mean absolute error."""
    if tuple(y_true.shape) != tuple(y_pred.shape):
        raise ShapeError(f"loss shapes differ: {tuple(y_true.shape)} vs "
                         f"{tuple(y_pred.shape)}")
    return tabs(y_pred - Tensor(np.asarray(y_true, dtype=np.float64))).mean()


# -- optimizer ------------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction; lr is supplied per step."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Step-decayed rate: lr0 * decay^(step // lr_step)."""
    return cfg.lr0 * cfg.lr_decay ** (step // cfg.lr_step)


# -- window extraction -------------------------------------------------------------

def _slice_windows(values: np.ndarray, starts: np.ndarray, input_size: int,
                   horizon: int) -> tuple[np.ndarray, np.ndarray]:
    ctx = np.stack([values[:, s:s + input_size] for s in starts])
    tgt = np.stack([values[:, s + input_size:s + input_size + horizon]
                    for s in starts])
    return ctx, tgt


def sample_windows(panel: PanelDataset, input_size: int, horizon: int,
                   batch: int, rng: np.random.Generator):
    """Uniformly sample training windows that end inside the train split."""
    panel.require_split()
    max_start = panel.train_end - (input_size + horizon)
    if max_start < 0:
        raise ConfigError(
            f"train split of {panel.train_end} steps cannot hold a window of "
            f"{input_size}+{horizon} steps")
    starts = rng.integers(0, max_start + 1, size=batch)
    return _slice_windows(panel.values, starts, input_size, horizon)


def eval_windows(panel: PanelDataset, input_size: int, horizon: int,
                 split: str = "val"):
    """Fixed non-overlapping target spans tiling a split, newest kept.

    Targets are placed back-to-back ending at the split boundary; contexts
    may extend into earlier data but never before t=0.
    """
    panel.require_split()
    if split == "val":
        lo, hi = panel.train_end, panel.val_end
    elif split == "test":
        lo, hi = panel.val_end, panel.n_steps
    else:
        raise ConfigError(f"unknown split '{split}'")
    starts = []
    end = hi
    while end - horizon >= lo and end - horizon - input_size >= 0:
        starts.append(end - horizon - input_size)
        end -= horizon
    if not starts:
        raise ConfigError(
            f"{split} split [{lo}, {hi}) too short for horizon {horizon}")
    starts.reverse()
    return _slice_windows(panel.values, np.asarray(starts), input_size,
                          horizon)


# -- training loop ------------------------------------------------------------------

def evaluate(model: ForecastModel, ctx: np.ndarray, tgt: np.ndarray,
             batch: int = 64) -> tuple[float, float]:
    """MAE and RMSE over windows, computed without the tape."""
    preds = []
    with no_grad():
        for i in range(0, len(ctx), batch):
            preds.append(model.forward(ctx[i:i + batch]).data)
    pred = np.concatenate(preds, axis=0)
    return mae(tgt, pred), rmse(tgt, pred)


def train(model: ForecastModel, panel: PanelDataset, cfg: TrainConfig,
          seed: int) -> TrainReport:
    """Train one model; returns traces and test metrics at the best step."""
    panel.require_split()
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters())
    input_size = model.config.input_size
    horizon = model.config.horizon
    val_ctx, val_tgt = eval_windows(panel, input_size, horizon, "val")

    train_trace: list[tuple[int, float]] = []
    val_trace: list[tuple[int, float]] = []
    best_val = np.inf
    best_step = 0
    best_state: dict[str, np.ndarray] | None = None
    checks_since_best = 0
    steps_run = 0

    with finite_checks(False):
        for step in range(cfg.max_steps):
            ctx, tgt = sample_windows(panel, input_size, horizon,
                                      cfg.windows_batch, rng)
            pred = model.forward(ctx, training=True, rng=rng)
            loss = mae_loss(tgt, pred)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(step)
            model.zero_grad()
            loss.backward()
            opt.step(lr_at(step, cfg))
            steps_run = step + 1
            train_trace.append((steps_run, loss_val))

            if steps_run % cfg.val_check_every == 0:
                val_mae, _ = evaluate(model, val_ctx, val_tgt)
                val_trace.append((steps_run, val_mae))
                if val_mae < best_val:
                    best_val = val_mae
                    best_step = steps_run
                    best_state = model.state_arrays()
                    checks_since_best = 0
                else:
                    checks_since_best += 1
                    if checks_since_best >= cfg.early_stop_patience:
                        break

    if best_state is not None:
        model.load_state(best_state)
    else:
        # no validation check ever ran; keep the final parameters
        val_mae, _ = evaluate(model, val_ctx, val_tgt)
        best_val, best_step = val_mae, steps_run
        val_trace.append((steps_run, val_mae))

    test_ctx, test_tgt = eval_windows(panel, input_size, horizon, "test")
    test_mae, test_rmse = evaluate(model, test_ctx, test_tgt)
    return TrainReport(seed=seed, best_step=best_step, best_val_mae=best_val,
                       test_mae=test_mae, test_rmse=test_rmse,
                       steps_run=steps_run, train_trace=train_trace,
                       val_trace=val_trace)
