"""Training loop shared by the three predictor kinds."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from dosegnn import autodiff as ad
from dosegnn.model import Model, ModelConfig, PlanInputs, forward, init_model, prepare_inputs
from dosegnn.rng import SplitMix64, derive_seed
from dosegnn.volume import PlanBundle

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    n_train: int = 15
    n_test: int = 5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    checksum: str = ""
    seconds: float = 0.0
    train_cases: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def split_dataset(bundles: list[PlanBundle], cfg: TrainConfig) -> tuple[list[PlanBundle], list[PlanBundle]]:
    """Seeded shuffle, then the first ``n_train`` train and the rest test."""
    if len(bundles) < 2:
        raise ValueError("need at least 2 plans to split")
    if cfg.n_train + cfg.n_test != len(bundles) or cfg.n_train < 1 or cfg.n_test < 1:
        raise ValueError(
            f"split {cfg.n_train}/{cfg.n_test} does not partition {len(bundles)} plans"
        )
    order = SplitMix64(derive_seed(cfg.seed, "split")).shuffle(list(range(len(bundles))))
    train = [bundles[i] for i in sorted(order[: cfg.n_train])]
    test = [bundles[i] for i in sorted(order[cfg.n_train:])]
    return train, test


class Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def plan_loss(model: Model, inputs: PlanInputs) -> ad.Tensor:
    """MSE between predicted and true dose, both divided by the prescription."""
    if inputs.target is None:
        raise ValueError("plan has no ground-truth dose")
    return ad.mse_loss(forward(model, inputs), inputs.target)


def train_model(model_config: ModelConfig, train_set: list[PlanBundle], cfg: TrainConfig,
                inputs: list[PlanInputs] | None = None, threads: int = 1) -> tuple[Model, TrainReport]:
    """Adam, one plan per step, plans visited in a seeded order each epoch."""
    if not train_set:
        raise ValueError("empty training set")
    start = time.perf_counter()
    model = init_model(model_config, derive_seed(cfg.seed, "init", model_config.kind))
    if inputs is None:
        inputs = [prepare_inputs(model_config, p, threads=threads) for p in train_set]
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    shuffler = SplitMix64(derive_seed(cfg.seed, "shuffle", model_config.kind))
    report = TrainReport(train_cases=[p.name for p in train_set])
    for epoch in range(cfg.epochs):
        total = 0.0
        for i in shuffler.shuffle(list(range(len(train_set)))):
            model.zero_grad()
            loss = plan_loss(model, inputs[i])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, plan {train_set[i].name!r}"
                )
            ad.backward(loss)
            opt.step()
            total += value
        report.epoch_loss.append(total / len(train_set))
        if epoch % 20 == 0 or epoch == cfg.epochs - 1:
            log.info("%s epoch %d loss %.6g", model_config.kind, epoch, report.epoch_loss[-1])
    model.zero_grad()
    report.checksum = model.checksum()
    report.seconds = time.perf_counter() - start
    return model, report
