"""Training loop, early stopping, optimizers and probabilistic prediction."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import loss as loss_mod
from .. import shash
from ..errors import DomainError, TrainingDivergedError, ValidationError
from ..verify import r_squared
from .network import ModelSpec, UNet, prepare_input

__all__ = [
    "TrainConfig",
    "ModelState",
    "EarlyStopping",
    "Adam",
    "SGD",
    "train",
    "forward",
    "predict",
    "build_network",
    "evaluate_loss",
    "median_r2",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 10
    loss: loss_mod.LossConfig = field(default_factory=loss_mod.LossConfig)
    seed: int = 0
    max_steps: int | None = None
    dtype: str = "float64"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError("optimizer must be 'sgd' or 'adam'")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")

    def to_dict(self):
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "loss" in d:
            d["loss"] = loss_mod.LossConfig.from_dict(d["loss"])
        fields = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in fields})


@dataclass
class ModelState:
    """Weights plus bookkeeping; ``weights`` is a name -> array mapping."""

    weights: dict
    epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    optimizer_state: dict = field(default_factory=dict)


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to lower validation loss."""

    def __init__(self, patience):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch, val_loss):
        """Record an epoch; returns True when it is a new best."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self):
        return self.bad_epochs >= self.patience


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params):
        for _, p, g in params:
            p -= self.lr * g

    def state(self):
        return {}


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-7):
        self.lr = lr
        self.b1 = beta1
        self.b2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p, g in params:
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()}, "v": {k: v.copy() for k, v in self.v.items()}}


def build_network(spec, state=None, dtype="float64", seed=0):
    net = UNet(spec, seed=seed, dtype=np.dtype(dtype))
    if state is not None:
        net.load_state_dict(state.weights if isinstance(state, ModelState) else state)
    return net


def _batch_loss_grad(net, spec, x, y, cfg, train):
    raw = net.forward(prepare_input(spec, x), train=train)
    raw64 = np.moveaxis(raw.astype(np.float64), 1, 0)
    if not np.all(np.isfinite(raw64)):
        raise TrainingDivergedError(f"network produced non-finite outputs (max |raw| = {np.nanmax(np.abs(raw64))})")
    value, grad = loss_mod.nll_grad(raw64, y, cfg.loss)
    return value, np.moveaxis(grad, 0, 1)


def evaluate_loss(net, spec, dataset, cfg, batch_size=32):
    """Mean per-pixel loss over a dataset in inference mode."""
    total = 0.0
    n = len(dataset)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        x, y = dataset.batch(idx)
        raw = net.forward(prepare_input(spec, x), train=False)
        value, _ = loss_mod.nll(loss_mod.transform(np.moveaxis(raw.astype(np.float64), 1, 0)), y, cfg.loss)
        total += value * len(idx)
    return total / n


def train(spec, train_data, val_data, cfg=TrainConfig(), on_epoch=None):
    """Fit the network by minibatch gradient descent with early stopping.

    Parameters
    ----------
    spec : ModelSpec
    train_data, val_data
        Datasets exposing ``len()`` and ``batch(indices) -> (x, y)`` with
        ``x`` shaped ``(N, L, H, W)`` and ``y`` shaped ``(N, H, W)``.
    cfg : TrainConfig
    on_epoch : callable, optional
        Called as ``on_epoch(record)`` after each epoch.

    Returns
    -------
    state : ModelState
        Weights from the epoch with the lowest validation loss.
    history : list of dict
        ``epoch``, ``steps``, ``train_loss``, ``val_loss`` per epoch.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValidationError("training and validation sets must be nonempty")
    spec.check_patch(*train_data.sample_shape[-2:])
    net = build_network(spec, dtype=cfg.dtype, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)
    stopper = EarlyStopping(cfg.patience)
    best = ModelState(weights=net.state_dict())
    history = []
    steps = 0
    n = len(train_data)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            x, y = train_data.batch(idx)
            net.zero_grad()
            value, grad = _batch_loss_grad(net, spec, x, y, cfg, train=True)
            if spec.l2_reg:
                value += spec.l2_reg * net.l2_penalty()
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {steps + 1}")
            net.backward(grad)
            if spec.l2_reg:
                net.add_l2_grad(spec.l2_reg)
            opt.step(net.parameters())
            losses.append(value)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        val_loss = evaluate_loss(net, spec, val_data, cfg)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        record = {"epoch": epoch, "steps": steps, "train_loss": float(np.mean(losses)), "val_loss": float(val_loss)}
        history.append(record)
        log.info("epoch %d  train %.4f  val %.4f", epoch, record["train_loss"], val_loss)
        if on_epoch is not None:
            on_epoch(record)
        if stopper.update(epoch, val_loss):
            best = ModelState(weights=net.state_dict(), epoch=epoch, best_epoch=epoch, best_val_loss=float(val_loss))
        if stopper.should_stop or (cfg.max_steps is not None and steps >= cfg.max_steps):
            break
    best.epoch = history[-1]["epoch"]
    best.optimizer_state = opt.state()
    return best, history


def forward(spec, state, x, dtype="float64"):
    """Raw parameter maps ``(N, 4, H, W)`` for scaled volumes ``x``."""
    net = build_network(spec, state, dtype=dtype)
    return net.forward(prepare_input(spec, x), train=False).astype(np.float64)


def predict(spec, state, x, quantiles=(0.5,), exceedance=(), batch_size=32):
    """Distribution products for each pixel.

    Returns
    -------
    dict
        ``params``: ShashParams with ``(N, H, W)`` maps; ``quantiles``:
        ``{p: map}``; ``exceedance``: ``{v: P(w >= v) map}``.
    """
    q = np.asarray(quantiles, dtype=np.float64)
    if np.any(~(q > 0) | ~(q < 1)):
        raise DomainError("quantile levels must lie in (0, 1)")
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    net = build_network(spec, state)
    raws = []
    for start in range(0, len(x), batch_size):
        xb = prepare_input(spec, x[start:start + batch_size].astype(np.float64))
        raws.append(net.forward(xb, train=False))
    raw = np.moveaxis(np.concatenate(raws).astype(np.float64), 1, 0)
    params = loss_mod.transform(raw)
    return {
        "params": params,
        "quantiles": {float(p): shash.quantile(params, p) for p in q},
        "exceedance": {float(v): 1.0 - shash.cdf(params, v) for v in exceedance},
    }


def median_r2(spec, state, dataset):
    """R^2 between the predicted median and the truth over a dataset."""
    x, y = dataset.all()
    med = shash.median(predict(spec, state, x)["params"])
    return r_squared(y, med)
