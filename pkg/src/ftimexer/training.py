"""Robust training: exogenous masking, consistency regularisation, Adam, fit loop."""
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .data import WindowSet
from .model import FTimeXer, ModelConfig

__all__ = [
    "TrainingDiverged",
    "MaskSpec",
    "LossBundle",
    "TrainConfig",
    "Adam",
    "FitResult",
    "sample_mask",
    "apply_mask",
    "consistency_loss",
    "prediction_loss",
    "train_step",
    "evaluate_loss",
    "fit",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, step, message="non-finite loss"):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class MaskSpec:
    p: float
    granularity: str = "entry"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"mask probability must lie in [0, 1], got {self.p}")
        if self.granularity not in ("entry", "variable", "timestep"):
            raise ValueError(f"unknown mask granularity {self.granularity!r}")


def sample_mask(shape, p, granularity="entry", rng=None) -> np.ndarray:
    """Keep-mask of 0/1 floats over the trailing ``(T, d_x)`` axes of ``shape``.

    ``entry`` drops cells independently, ``variable`` drops whole columns and
    ``timestep`` drops whole rows, each with probability ``p``.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mask probability must lie in [0, 1], got {p}")
    rng = np.random.default_rng() if rng is None else rng
    shape = tuple(shape)
    if granularity == "entry":
        draw_shape = shape
    elif granularity == "variable":
        draw_shape = shape[:-2] + (1, shape[-1])
    elif granularity == "timestep":
        draw_shape = shape[:-1] + (1,)
    else:
        raise ValueError(f"unknown mask granularity {granularity!r}")
    keep = (rng.random(draw_shape) >= p).astype(np.float64)
    return np.broadcast_to(keep, shape).copy()


def apply_mask(x_exo, spec, rng=None):
    """Zero a random subset of exogenous cells. Returns ``(masked, mask)``."""
    if isinstance(spec, (int, float)):
        spec = MaskSpec(float(spec))
    x_exo = np.asarray(x_exo, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    mask = sample_mask(x_exo.shape, spec.p, spec.granularity, rng)
    return mask * x_exo, mask


def _as_2d(t):
    return t.reshape(t.shape[0], -1) if t.ndim > 1 else t.reshape(1, -1)


def consistency_loss(y_hat, y_hat_masked):
    """Squared L2 distance between two prediction batches, averaged over the batch."""
    a, b = tn._wrap(y_hat), tn._wrap(y_hat_masked)
    if a.shape != b.shape:
        raise ValueError(f"prediction shapes differ: {a.shape} vs {b.shape}")
    n = a.shape[0] if a.ndim > 1 else 1
    return tn.scale(tn.sum_squares(a - b), 1.0 / n)


def prediction_loss(y, y_hat, kind="mse"):
    """Mean over samples of the per-sample MSE or MAE."""
    y, y_hat = tn._wrap(y), tn._wrap(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"target {y.shape} and prediction {y_hat.shape} differ")
    if y.size == 0:
        raise ValueError("prediction loss over an empty batch")
    if kind == "mse":
        return tn.mse(y_hat, y)
    if kind == "mae":
        return tn.mae(y_hat, y)
    raise ValueError(f"unknown loss kind {kind!r}")


@dataclass(frozen=True)
class LossBundle:
    l_pred: float
    l_cons: float
    total: float
    lam: float


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 64
    epochs: int = 50
    patience: int = 10
    val_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size and epochs must be positive")
        if not 0.0 <= self.val_frac < 1.0:
            raise ValueError("val_frac must lie in [0, 1)")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Adam without weight decay; gradients are clipped by global norm first."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=1.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if self.clip_norm:
            norm = math.sqrt(float(np.sum([np.vdot(g, g) for g in grads])))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self):
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}


def train_step(batch, model: FTimeXer, optimizer: Adam, cfg: ModelConfig = None, rng=None, step=0) -> LossBundle:
    """One optimisation step on ``batch = (x_endo, x_exo, y)``.

    Robust path with consistency: prediction loss on the clean forward pass,
    consistency between clean and masked passes. Robust path without
    consistency: prediction loss on the masked pass alone. Plain path: one
    clean pass.
    """
    cfg = model.cfg if cfg is None else cfg
    x_endo, x_exo, y = batch
    rng = np.random.default_rng(0) if rng is None else rng
    lam = cfg.cons_weight
    optimizer.zero_grad()
    use_mask = cfg.robust_training_on and cfg.n_exo > 0
    if use_mask and cfg.consistency_on:
        y_hat = model.forward(x_endo, x_exo)
        masked, _ = apply_mask(x_exo, MaskSpec(cfg.mask_p, cfg.mask_granularity), rng)
        y_hat_masked = model.forward(x_endo, masked)
        l_pred = prediction_loss(y, y_hat, cfg.loss_kind)
        l_cons = consistency_loss(y_hat, y_hat_masked)
        total = l_pred + tn.scale(l_cons, lam)
        cons_value = float(l_cons.data)
    else:
        if use_mask:
            x_exo, _ = apply_mask(x_exo, MaskSpec(cfg.mask_p, cfg.mask_granularity), rng)
        y_hat = model.forward(x_endo, x_exo)
        l_pred = prediction_loss(y, y_hat, cfg.loss_kind)
        total = l_pred
        cons_value = 0.0
    if not np.isfinite(total.data):
        raise TrainingDiverged(step)
    tn.backward(total)
    for p in optimizer.params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(step, f"non-finite gradient for {p.name}")
    optimizer.step()
    return LossBundle(float(l_pred.data), cons_value, float(total.data), lam)


def evaluate_loss(model: FTimeXer, ws: WindowSet, kind="mse", batch_size=512) -> float:
    if len(ws) == 0:
        return math.nan
    pred = model.predict(ws.x_endo, ws.x_exo, batch_size=batch_size)
    diff = pred - ws.y
    return float(np.mean(diff * diff) if kind == "mse" else np.mean(np.abs(diff)))


@dataclass
class FitResult:
    model: FTimeXer
    log: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    steps: int = 0


def fit(train: WindowSet, model_cfg: ModelConfig, train_cfg: TrainConfig = TrainConfig(), log_path=None,
        model: FTimeXer = None) -> FitResult:
    """Mini-batch training with a chronological validation tail and early stopping.

    The final ``val_frac`` of the (already normalised) training windows is held
    out. The returned model carries the parameters of the best validation
    epoch. Everything is a deterministic function of ``train_cfg.seed``.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    n_val = int(math.floor(train_cfg.val_frac * len(train)))
    if n_val >= len(train):
        raise ValueError("validation split leaves no training windows")
    fit_ws = train.subset(slice(0, len(train) - n_val))
    val_ws = train.subset(slice(len(train) - n_val, len(train)))

    seed = train_cfg.seed
    if model is None:
        model = FTimeXer(model_cfg, seed=seed)
    opt = Adam(model.params.values(), train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps,
               train_cfg.clip_norm)
    shuffle_rng = np.random.default_rng([seed, 1])
    mask_rng = np.random.default_rng([seed, 2])

    result = FitResult(model=model)
    best_state = model.state_dict()
    stale = 0
    step = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(len(fit_ws))
            sums = np.zeros(3)
            for start in range(0, len(order), train_cfg.batch_size):
                idx = order[start:start + train_cfg.batch_size]
                batch = (fit_ws.x_endo[idx], fit_ws.x_exo[idx], fit_ws.y[idx])
                bundle = train_step(batch, model, opt, model_cfg, mask_rng, step)
                step += 1
                sums += len(idx) * np.array([bundle.l_pred, bundle.l_cons, bundle.total])
            sums /= len(fit_ws)
            val = evaluate_loss(model, val_ws) if n_val else float(sums[0])
            record = {
                "epoch": epoch,
                "l_pred": float(sums[0]),
                "l_cons": float(sums[1]),
                "total": float(sums[2]),
                "val_mse": val,
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
                "seed": seed,
            }
            result.log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if val < result.best_val:
                result.best_val, result.best_epoch = val, epoch
                best_state = model.state_dict()
                stale = 0
            else:
                stale += 1
                if stale >= train_cfg.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best_state)
    result.steps = step
    return result
