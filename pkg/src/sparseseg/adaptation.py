"""Supervised tuning on a few-shot support set, and the two baselines."""

from __future__ import annotations

import re
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import model as M
from .errors import ConfigError, DataError, NumericalError
from .meta_trainer import SUPPORT, LabeledBatch, query_batch
from .objective import weighted_cross_entropy
from .task_store import SegTask


@dataclass
class TuneConfig:
    learning_rate: float = 1e-3
    epochs: int = 40
    batch_size: int = 5
    seed: int = 0
    class_weights: tuple[float, float] | None = None
    optimizer: str = "adam"  # or "sgd": the same plain step the meta-trainer's inner loop takes

    def validate(self):
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("learning_rate, epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"tune.optimizer must be one of {sorted(OPTIMIZERS)}")


OPTIMIZERS = {"adam": torch.optim.Adam, "sgd": torch.optim.SGD}


def finetune(theta, support: LabeledBatch, model_config: M.ModelConfig, config: TuneConfig):
    """Adam (or plain SGD) on the selective cross-entropy over all parameters, fixed epoch budget."""
    config.validate()
    if support.role != SUPPORT:
        raise DataError(f"finetune given {support.role!r} labels; only support labels are allowed")
    n = len(support.images)
    if n == 0:
        raise DataError("empty support set")
    params = OrderedDict((k, v.detach().clone().requires_grad_()) for k, v in theta.items())
    if config.epochs == 0:
        return M.detached(params)
    opt = OPTIMIZERS[config.optimizer](list(params.values()), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size])
            scores = M.forward(params, support.images[idx], model_config)
            loss = weighted_cross_entropy(scores, support.labels[idx], config.class_weights)
            if loss.empty:
                continue
            if not torch.isfinite(loss.value):
                raise NumericalError("non-finite tuning loss")
            opt.zero_grad()
            loss.value.backward()
            opt.step()
    return M.detached(params)


def train_from_scratch(support: LabeledBatch, model_config: M.ModelConfig, config: TuneConfig):
    return finetune(M.init_params(model_config, config.seed), support, model_config, config)


def pretrain_dense(source_task: SegTask, model_config: M.ModelConfig, config: TuneConfig):
    """Dense-label supervised training on the source task's support (training) pool."""
    if not source_task.support:
        raise DataError(f"source task {source_task.id} has no training samples")
    batch = query_batch(source_task.support)
    batch = LabeledBatch(batch.images, batch.labels, SUPPORT, batch.ids)
    return train_from_scratch(batch, model_config, config)


def support_loss(params, support: LabeledBatch, model_config: M.ModelConfig) -> float:
    with torch.no_grad():
        return float(weighted_cross_entropy(M.forward(params, support.images, model_config), support.labels).value)


def safe_name(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", text).strip("-")


def adapted_checkpoint_name(task: str, method: str, k: int, sparsity: str, fold: int) -> str:
    return f"{safe_name(task)}_{safe_name(method)}_{k}shot_{sparsity}_{fold}.ckpt"


def with_seed(config: TuneConfig, seed: int) -> TuneConfig:
    return replace(config, seed=int(seed))
