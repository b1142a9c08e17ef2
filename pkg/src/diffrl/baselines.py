"""Supervised reward fine-tuning baselines: reward-weighted regression and RAFT (best-of-k)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Graph
from .diffusion import NoiseSchedule, SamplerConfig, generate, pretraining_loss
from .metrics import MetricsRow
from .model import DenoiserParams, ParamNodes
from .rl import TaskBinding, TrainerState, optimizer_step
from .tasks import WorldSpec, make_prompt

log = logging.getLogger(__name__)

PAPER_RW_BETA = 0.5
PAPER_RAFT_K = 24
PAPER_RAFT_ACCEPT = 1


@dataclass
class BaselineConfig:
    method: str = "reward_weighted"
    beta_rw: float = PAPER_RW_BETA
    k: int = PAPER_RAFT_K
    accept_count: int = PAPER_RAFT_ACCEPT
    prompts_per_iteration: int = 16
    samples_per_prompt: int = 8
    sample_eta: float = 0.0
    lr: float = 1e-4
    weight_decay: float = 1e-2
    grad_clip: float = 1.0
    context_dropout: float = 0.1
    max_iterations: int = 100
    seed: int = 0
    freeze_context_embedding: bool = True
    divergence_ratio: float = 0.5

    def validate(self) -> None:
        if self.method not in ("reward_weighted", "raft"):
            raise ValueError(f"unknown baseline method {self.method!r}")
        if not 1 <= self.accept_count <= self.k:
            raise ValueError(f"need 1 <= accept_count <= k, got {self.accept_count}, {self.k}")
        if self.beta_rw <= 0:
            raise ValueError(f"beta_rw must be > 0, got {self.beta_rw}")


def acceptance_count(k: int, ratio: float) -> int:
    return max(1, int(round(k * ratio)))


def minmax_normalize(rewards) -> np.ndarray:
    """Affine map of rewards onto [0, 1]; a constant batch maps to all ones."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("minmax_normalize: empty rewards")
    lo, hi = r.min(), r.max()
    if hi == lo:
        return np.ones_like(r)
    return (r - lo) / (hi - lo)


def top_k_indices(rewards, count: int) -> np.ndarray:
    """Indices of the ``count`` largest rewards; ties resolved toward the lower index."""
    return np.sort(np.argsort(-np.asarray(rewards), kind="stable")[:count])


class DivergenceMonitor:
    """Flags when the mean reward drops below ``ratio`` of its running peak (positive rewards)."""

    def __init__(self, ratio: float = 0.5):
        self.ratio = ratio
        self.peak = -np.inf
        self.flags: list[int] = []

    def update(self, iteration: int, mean_reward: float) -> bool:
        self.peak = max(self.peak, mean_reward)
        fired = self.peak > 0 and mean_reward < self.ratio * self.peak
        if fired:
            self.flags.append(iteration)
        return fired


def _regression_step(state, x0, contexts, weights, world, config, schedule) -> float:
    graph = Graph()
    pn = ParamNodes(graph, state.params)
    loss = pretraining_loss(
        graph, pn, x0, world.embed_many(contexts), schedule, config.context_dropout, state.rngs["pretrain"], weights
    )
    return optimizer_step(state, graph, pn, loss, config)


def _prompts(binding: TaskBinding, n: int, repeat: int, rng) -> list:
    prompts = [make_prompt(binding.task, rng) for _ in range(n)]
    return [c for c in prompts for _ in range(repeat)]


def reward_weighted_step(
    state: TrainerState,
    base: DenoiserParams,
    binding: TaskBinding,
    world: WorldSpec,
    config: BaselineConfig,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
) -> MetricsRow:
    """Samples always come from the frozen base model; the loss weights follow normalized reward."""
    rng = state.rngs["rollout"]
    contexts = _prompts(binding, config.prompts_per_iteration, config.samples_per_prompt, rng)
    seeds = rng.integers(0, 2**63 - 1, size=len(contexts))
    gen_cfg = SamplerConfig(sampler.num_inference_steps, config.sample_eta, sampler.guidance_scale)
    x0 = generate(base, world.embed_many(contexts), gen_cfg, schedule, seeds)
    rewards = binding.reward.score(x0, contexts, world)
    weights = minmax_normalize(rewards) ** (1.0 / config.beta_rw)
    loss = _regression_step(state, x0, contexts, weights, world, config, schedule)
    state.iteration += 1
    return MetricsRow(state.iteration - 1, binding.name, float(rewards.mean()), loss_pretrain=loss)


def raft_step(
    state: TrainerState,
    binding: TaskBinding,
    world: WorldSpec,
    config: BaselineConfig,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
) -> MetricsRow:
    """Best-of-k per prompt from the current model, then an unweighted regression step on the kept samples."""
    rng = state.rngs["rollout"]
    k = config.k
    contexts = _prompts(binding, config.prompts_per_iteration, k, rng)
    seeds = rng.integers(0, 2**63 - 1, size=len(contexts))
    gen_cfg = SamplerConfig(sampler.num_inference_steps, config.sample_eta, sampler.guidance_scale)
    x0 = generate(state.params, world.embed_many(contexts), gen_cfg, schedule, seeds)
    rewards = binding.reward.score(x0, contexts, world)
    keep = np.concatenate([i + top_k_indices(rewards[i : i + k], config.accept_count) for i in range(0, len(contexts), k)])
    loss = _regression_step(state, x0[keep], [contexts[i] for i in keep], None, world, config, schedule)
    state.iteration += 1
    return MetricsRow(state.iteration - 1, binding.name, float(rewards.mean()), loss_pretrain=loss)


@dataclass
class BaselineResult:
    state: TrainerState
    metrics: list[MetricsRow]
    divergence_flags: list[int] = field(default_factory=list)


def train_baseline(
    config: BaselineConfig,
    binding: TaskBinding,
    world: WorldSpec,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
    base: DenoiserParams,
    on_iteration: Callable[[TrainerState, list[MetricsRow]], None] | None = None,
) -> BaselineResult:
    config.validate()
    state = TrainerState.fresh(base, config.seed)
    frozen_base = base.copy()
    monitor = DivergenceMonitor(config.divergence_ratio)
    metrics = []
    while state.iteration < config.max_iterations:
        if config.method == "reward_weighted":
            row = reward_weighted_step(state, frozen_base, binding, world, config, sampler, schedule)
        else:
            row = raft_step(state, binding, world, config, sampler, schedule)
        if monitor.update(row.iteration, row.mean_reward):
            log.warning("%s: mean reward %.4f fell below %.0f%% of peak %.4f at iteration %d",
                        config.method, row.mean_reward, 100 * config.divergence_ratio, monitor.peak, row.iteration)
        metrics.append(row)
        if on_iteration is not None:
            on_iteration(state, [row])
    return BaselineResult(state, metrics, monitor.flags)
