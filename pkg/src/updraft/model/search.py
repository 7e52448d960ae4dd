"""Random hyperparameter search with validation-R^2 model selection."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .. import loss as loss_mod
from ..errors import TrainingDivergedError, ValidationError
from .network import ModelSpec
from .train import TrainConfig, median_r2, train

__all__ = ["HyperSpace", "sample_hyperparameters", "hypersearch"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HyperSpace:
    """Candidate values per hyperparameter.

    The defaults are editable desk-scale placeholders sized for CPU runs.
    """

    kernel_size: tuple = (3, 5)
    base_filters: tuple = (4, 8, 16)
    depth: tuple = (1, 2, 3)
    optimizer: tuple = ("adam", "sgd")
    batch_norm: tuple = (False, True)
    batch_size: tuple = (8, 16, 32)
    weight_above: tuple = (1.0, 2.0, 5.0)
    weight_threshold: tuple = (5.0, 10.0)
    l2_reg: tuple = (0.0, 1e-5, 1e-4)

    def __post_init__(self):
        for name, values in asdict(self).items():
            if len(values) == 0:
                raise ValidationError(f"hyperparameter {name!r} has no candidates")

    @classmethod
    def from_dict(cls, d):
        fields = cls.__dataclass_fields__
        return cls(**{k: tuple(v) for k, v in d.items() if k in fields})


def sample_hyperparameters(space, n, seed, base_spec=ModelSpec(), base_cfg=TrainConfig()):
    """Draw ``n`` independent uniform configurations.

    Returns
    -------
    list of (ModelSpec, TrainConfig)
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    choices = asdict(space)

    def pick(name):
        values = choices[name]
        return values[int(rng.integers(len(values)))]

    draws = []
    for _ in range(n):
        spec = replace(
            base_spec,
            kernel_size=int(pick("kernel_size")),
            base_filters=int(pick("base_filters")),
            depth=int(pick("depth")),
            batch_norm=bool(pick("batch_norm")),
            l2_reg=float(pick("l2_reg")),
        )
        cfg = replace(
            base_cfg,
            optimizer=pick("optimizer"),
            batch_size=int(pick("batch_size")),
            loss=loss_mod.LossConfig(
                epsilon=base_cfg.loss.epsilon,
                weight_policy=loss_mod.WeightPolicy(
                    threshold=float(pick("weight_threshold")), weight_above=float(pick("weight_above"))
                ),
            ),
        )
        draws.append((spec, cfg))
    return draws


@dataclass
class SearchResult:
    runs: list = field(default_factory=list)
    best_index: int | None = None

    @property
    def best(self):
        return None if self.best_index is None else self.runs[self.best_index]


def hypersearch(space, n, seed, train_data, val_data, base_spec=ModelSpec(), base_cfg=TrainConfig()):
    """Train every sampled configuration and keep the best validation R^2.

    Diverged runs are recorded with ``r2 = None`` and skipped in selection.
    """
    result = SearchResult()
    best_r2 = -np.inf
    for k, (spec, cfg) in enumerate(sample_hyperparameters(space, n, seed, base_spec, base_cfg)):
        spec.check_patch(*train_data.sample_shape[-2:])
        run = {"index": k, "spec": spec, "config": cfg}
        try:
            state, history = train(spec, train_data, val_data, cfg)
            r2 = median_r2(spec, state, val_data)
            run.update(state=state, history=history, r2=r2)
        except TrainingDivergedError as exc:
            log.warning("run %d diverged: %s", k, exc)
            run.update(state=None, history=[], r2=None, error=str(exc))
        result.runs.append(run)
        if run["r2"] is not None and run["r2"] > best_r2:
            best_r2 = run["r2"]
            result.best_index = k
    return result
