from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, forward_backward
from .diffusion import NoiseSchedule, pretraining_loss
from .model import DenoiserParams, ParamNodes
from .optim import AdamWState, adamw_step
from .tasks import PretrainData, WorldSpec

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    steps: int = 4000
    batch_size: int = 256
    lr: float = 2e-3
    lr_final: float = 1e-4
    weight_decay: float = 0.0
    context_dropout: float = 0.1
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0


def pretrain_model(
    data: PretrainData,
    world: WorldSpec,
    schedule: NoiseSchedule,
    config: PretrainConfig,
    params: DenoiserParams | None = None,
) -> tuple[DenoiserParams, list[float]]:
    """Fit the denoiser on ``data`` with the eps-prediction loss; cosine-decayed Adam(W)."""
    init_rng, loss_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    if params is None:
        params = DenoiserParams.init(world.sample_dim, world.context_dim, config.hidden, init_rng)
    embeds = world.embed_many(data.contexts)
    opt = AdamWState.zeros(params.size)
    flat = params.flat()
    losses = []
    for step in range(config.steps):
        idx = loss_rng.integers(0, len(data), size=config.batch_size)
        graph = Graph()
        pn = ParamNodes(graph, params)
        loss = pretraining_loss(graph, pn, data.x0[idx], embeds[idx], schedule, config.context_dropout, loss_rng)
        value, grads = forward_backward(graph, loss)
        frac = step / max(config.steps - 1, 1)
        lr = config.lr_final + 0.5 * (config.lr - config.lr_final) * (1.0 + np.cos(np.pi * frac))
        flat, opt = adamw_step(flat, pn.flat_grad(grads), opt, lr, config.weight_decay)
        params = params.with_flat(flat)
        losses.append(value)
        if step % 500 == 0:
            log.info("pretrain step %d loss %.4f", step, value)
    return params, losses
