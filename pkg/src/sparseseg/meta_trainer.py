"""Episodic meta-training with sparse inner losses and dense outer losses.

Each episode adapts the shared initialization on a sparsely labeled support
batch (``theta_i = theta - alpha * grad L_sup(theta)``) and scores the adapted
parameters on a densely labeled query batch. The outer update differentiates
the summed query losses w.r.t. the *original* parameters, through the inner
step when ``second_order`` is on.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import model as M
from .errors import ConfigError, DataError, NumericalError
from .objective import LossValue, weighted_cross_entropy
from .sparsifier import SparsitySpec, image_seed, sparsify
from .task_store import LabeledPair, MetaDataset

log = logging.getLogger(__name__)

SUPPORT, QUERY = "support", "query"


@dataclass
class MetaConfig:
    alpha: float = 0.1
    beta: float = 0.01
    inner_steps: int = 1
    task_batch: int = 4
    support_batch: int = 5
    query_batch: int = 5
    meta_iterations: int = 1000
    second_order: bool = True
    optimizer: str = "sgd"
    resample_support: bool = True
    grad_clip: float | None = None
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self):
        if not (self.alpha >= 0 and self.beta >= 0):
            raise ConfigError("alpha and beta must be non-negative")
        if self.inner_steps < 1 or self.task_batch < 1 or self.support_batch < 1 or self.query_batch < 1:
            raise ConfigError("inner_steps and batch sizes must be >= 1")
        if self.meta_iterations < 0:
            raise ConfigError("meta_iterations must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


@dataclass
class LabeledBatch:
    """Images ``N x 1 x H x W`` with labels ``N x H x W``; ``role`` records label provenance."""

    images: torch.Tensor
    labels: torch.Tensor
    role: str
    ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.ids)


@dataclass
class Episode:
    task_id: str
    support: LabeledBatch
    query: LabeledBatch


def support_batch(pairs: list[LabeledPair], sparsity: SparsitySpec, seeds) -> LabeledBatch:
    """Sparsify dense pairs (one seed per pair) into a support batch."""
    labels = [sparsify(p.labels, sparsity, s) for p, s in zip(pairs, seeds)]
    return LabeledBatch(M.as_batch([p.image for p in pairs]),
                        torch.from_numpy(np.stack(labels)).long(), SUPPORT, [p.id for p in pairs])


def query_batch(pairs: list[LabeledPair]) -> LabeledBatch:
    return LabeledBatch(M.as_batch([p.image for p in pairs]),
                        torch.from_numpy(np.stack([p.labels for p in pairs])).long(), QUERY, [p.id for p in pairs])


class SegLearner:
    """Binds a forward map to the selective loss and enforces label provenance."""

    def __init__(self, config: M.ModelConfig, forward=None, class_weights=None):
        self.config = config
        self.forward = forward or M.forward
        self.class_weights = class_weights

    def loss(self, params, batch: LabeledBatch) -> LossValue:
        return weighted_cross_entropy(self.forward(params, batch.images, self.config), batch.labels,
                                      self.class_weights)

    def support_loss(self, params, episode: Episode) -> torch.Tensor:
        if episode.support.role != SUPPORT:
            raise DataError(f"inner loss given {episode.support.role!r} labels")
        return self.loss(params, episode.support).value

    def query_loss(self, params, episode: Episode) -> torch.Tensor:
        if episode.query.role != QUERY:
            raise DataError(f"outer loss given {episode.query.role!r} labels")
        return self.loss(params, episode.query).value


def sample_task_batch(meta: MetaDataset, config: MetaConfig, rng: np.random.Generator) -> list[Episode]:
    if not meta.tasks:
        raise DataError("empty meta-dataset")
    episodes = []
    for t in rng.choice(len(meta.tasks), size=config.task_batch, p=meta.sampling_weights):
        task = meta.tasks[t]
        s_idx = rng.choice(len(task.support), size=min(config.support_batch, len(task.support)), replace=False)
        q_idx = rng.choice(len(task.query), size=min(config.query_batch, len(task.query)), replace=False)
        pairs = [task.support[i] for i in sorted(s_idx)]
        if config.resample_support:
            seeds = rng.integers(0, 2**63 - 1, size=len(pairs))
        else:
            seeds = [image_seed(config.seed, p.id, task.sparsity.tag) for p in pairs]
        episodes.append(Episode(task.id, support_batch(pairs, task.sparsity, seeds),
                                query_batch([task.query[i] for i in sorted(q_idx)])))
    return episodes


def _check_finite(value: torch.Tensor, what: str):
    if not torch.isfinite(value).all():
        raise NumericalError(f"non-finite {what}")


def inner_adapt(theta, episode: Episode, alpha: float, inner_steps: int, learner,
                second_order: bool = True):
    """Plain gradient steps on the sparse support loss.

    With ``second_order`` the result stays attached to ``theta``'s graph, so
    gradients of anything computed from it flow back through the update.
    Without it the step direction is detached: ``d theta_i / d theta = I``.
    """
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    params = OrderedDict((k, v if v.requires_grad else v.detach().requires_grad_()) for k, v in theta.items())
    for _ in range(inner_steps):
        loss = learner.support_loss(params, episode)
        _check_finite(loss, "support loss")
        grads = torch.autograd.grad(loss, list(params.values()), create_graph=second_order, allow_unused=True)
        new = OrderedDict()
        for (k, p), g in zip(params.items(), grads):
            if g is None:
                new[k] = p
                continue
            _check_finite(g, f"inner gradient of {k}")
            new[k] = p - alpha * (g if second_order else g.detach())
        params = new
    return params


def meta_gradient(theta, episodes: list[Episode], config: MetaConfig, learner):
    """Gradient of the summed query losses w.r.t. ``theta``; returns ``(grads, mean query loss)``."""
    if not episodes:
        raise DataError("outer step needs at least one episode")
    leaves = OrderedDict((k, v.detach().requires_grad_()) for k, v in theta.items())
    total = OrderedDict((k, torch.zeros_like(v)) for k, v in leaves.items())
    loss_sum = 0.0
    for ep in episodes:
        adapted = inner_adapt(leaves, ep, config.alpha, config.inner_steps, learner, config.second_order)
        q = learner.query_loss(adapted, ep)
        _check_finite(q, "query loss")
        grads = torch.autograd.grad(q, list(leaves.values()), allow_unused=True)
        for k, g in zip(leaves, grads):
            if g is not None:
                total[k] += g
        loss_sum += float(q.detach())
    for k, g in total.items():
        _check_finite(g, f"meta-gradient of {k}")
    return total, loss_sum / len(episodes)


def _clip(grads, max_norm):
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        grads = OrderedDict((k, g * (max_norm / norm)) for k, g in grads.items())
    return grads


def outer_step(theta, episodes: list[Episode], config: MetaConfig, learner):
    """One plain-gradient meta-update: ``theta - beta * meta_gradient``."""
    grads, _ = meta_gradient(theta, episodes, config, learner)
    grads = _clip(grads, config.grad_clip)
    return OrderedDict((k, (v.detach() - config.beta * grads[k])) for k, v in theta.items())


def meta_train(meta: MetaDataset, model_config: M.ModelConfig, meta_config: MetaConfig, learner=None,
               init=None, checkpoint_path: str | Path | None = None):
    """Run ``meta_iterations`` outer steps. Returns ``(params, log_rows)``.

    Log rows are ``dict(iteration, mean_query_loss, wall_time_s)``, one per step.
    """
    meta_config.validate()
    learner = learner or SegLearner(model_config)
    theta = M.detached(init) if init is not None else M.init_params(model_config, meta_config.seed)
    rng = np.random.default_rng(meta_config.seed)
    opt = None
    if meta_config.optimizer == "adam":
        theta = OrderedDict((k, v.requires_grad_()) for k, v in theta.items())
        opt = torch.optim.Adam(list(theta.values()), lr=meta_config.beta)
    rows = []
    start = time.perf_counter()
    for it in range(1, meta_config.meta_iterations + 1):
        episodes = sample_task_batch(meta, meta_config, rng)
        grads, mean_loss = meta_gradient(theta, episodes, meta_config, learner)
        grads = _clip(grads, meta_config.grad_clip)
        if opt is None:
            theta = OrderedDict((k, v.detach() - meta_config.beta * grads[k]) for k, v in theta.items())
        else:
            for k, v in theta.items():
                v.grad = grads[k]
            opt.step()
        rows.append({"iteration": it, "mean_query_loss": mean_loss,
                     "wall_time_s": time.perf_counter() - start})
        if it % 50 == 0:
            log.info("meta-iteration %d  query loss %.4f", it, mean_loss)
        if checkpoint_path and meta_config.checkpoint_every and it % meta_config.checkpoint_every == 0:
            M.save_checkpoint(checkpoint_path, theta, model_config, seed=meta_config.seed, iteration=it)
    theta = M.detached(theta)
    if checkpoint_path:
        M.save_checkpoint(checkpoint_path, theta, model_config, seed=meta_config.seed,
                          iteration=meta_config.meta_iterations)
    return theta, rows


def write_log(path: str | Path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["iteration", "mean_query_loss", "wall_time_s"])
        w.writeheader()
        w.writerows(rows)
    return path
