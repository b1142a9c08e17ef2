"""Clipped importance-sampled policy gradient over the denoising chain, and the multi-task loop.

Each outer iteration freezes a snapshot of the model, collects rollouts for every
task from that snapshot, takes one optimizer step per selected denoising step per
task, and finishes with one step on the (weighted) denoising loss.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Graph, Node, forward_backward
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    Trajectory,
    gaussian_log_prob,
    predict_eps,
    pretraining_loss,
    reverse_step_params,
    sample_trajectories,
    transition_log_prob_graph,
)
from .metrics import MetricsRow
from .model import DenoiserParams, ParamNodes
from .optim import AdamWState, adamw_step, clip_global_norm
from .rewards import AdvantageBatch, RewardBinding, RunningStats, normalize_advantages
from .tasks import PretrainData, TaskSpec, WorldSpec, make_prompt

PAPER_CLIP_EPSILON = 1e-4
PAPER_TIMESTEPS = 5
PAPER_LR = 2e-6


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    clip_epsilon: float = PAPER_CLIP_EPSILON
    timesteps_per_iteration: int = PAPER_TIMESTEPS
    beta_pretrain: float = 0.1
    lr: float = 1e-4
    weight_decay: float = 1e-2
    grad_clip: float = 1.0
    prompts_per_iteration: int = 16
    samples_per_prompt: int = 8
    pretrain_batch_size: int = 64
    context_dropout: float = 0.1
    norm_mode: str = "batch"
    max_iterations: int = 100
    seed: int = 0
    freeze_context_embedding: bool = True
    record_wall_time: bool = False

    def validate(self, sampler: SamplerConfig) -> None:
        if not self.clip_epsilon > 0:
            raise ValueError(f"clip_epsilon must be > 0, got {self.clip_epsilon}")
        if not 1 <= self.timesteps_per_iteration <= sampler.num_inference_steps:
            raise ValueError(
                f"timesteps_per_iteration must be in [1, {sampler.num_inference_steps}], got {self.timesteps_per_iteration}"
            )
        if self.beta_pretrain < 0:
            raise ValueError(f"beta_pretrain must be >= 0, got {self.beta_pretrain}")
        if self.norm_mode not in ("batch", "prompt"):
            raise ValueError(f"norm_mode must be 'batch' or 'prompt', got {self.norm_mode!r}")
        if sampler.eta <= 0:
            raise ValueError("RL fine-tuning needs a stochastic sampler (eta > 0)")


@dataclass(frozen=True)
class TaskBinding:
    name: str
    task: TaskSpec
    reward: RewardBinding
    prompts_per_iteration: int | None = None
    samples_per_prompt: int | None = None

    def shape(self, config: TrainConfig) -> tuple[int, int]:
        p = self.prompts_per_iteration or config.prompts_per_iteration
        s = self.samples_per_prompt or config.samples_per_prompt
        if self.reward.distributional:
            s = self.reward.minibatch_size
        return p, s


def params_id(params: DenoiserParams) -> str:
    return hashlib.sha1(params.flat().tobytes()).hexdigest()[:16]


@dataclass
class RolloutBatch:
    trajectories: list[Trajectory]
    rewards: np.ndarray
    advantages: AdvantageBatch
    theta_old_id: str
    states: np.ndarray = field(init=False, repr=False)  # (n, K + 1, d)
    log_probs: np.ndarray = field(init=False, repr=False)  # (n, K)
    embeds: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.states = np.stack([tr.states for tr in self.trajectories])
        self.log_probs = np.stack([tr.log_probs for tr in self.trajectories])
        self.embeds = np.stack([tr.context_embed for tr in self.trajectories])

    @property
    def timesteps(self) -> np.ndarray:
        return self.trajectories[0].timesteps

    def __len__(self) -> int:
        return len(self.trajectories)


def collect_rollouts(
    params_old: DenoiserParams,
    binding: TaskBinding,
    world: WorldSpec,
    config: TrainConfig,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    running_stats: RunningStats | None = None,
) -> RolloutBatch:
    """Sample prompts x repeats from the frozen snapshot, score them, normalize advantages."""
    binding.reward.validate(world)
    n_prompts, per_prompt = binding.shape(config)
    prompts = [make_prompt(binding.task, rng) for _ in range(n_prompts)]
    contexts = [c for c in prompts for _ in range(per_prompt)]
    seeds = rng.integers(0, 2**63 - 1, size=len(contexts))
    trajs = sample_trajectories(params_old, contexts, world.embed_many(contexts), sampler, schedule, seeds)
    x0 = np.stack([tr.x0 for tr in trajs])
    rewards = binding.reward.score(x0, contexts, world)
    groups = np.repeat(np.arange(n_prompts), per_prompt) if binding.reward.distributional else None
    if config.norm_mode == "batch":
        adv = normalize_advantages(rewards, "batch", groups=groups)
    else:
        adv = normalize_advantages(rewards, "prompt", running_stats, keys=[c.key for c in contexts])
    for tr, r in zip(trajs, rewards):
        tr.reward = float(r)
    return RolloutBatch(trajs, rewards, adv, params_id(params_old))


def importance_ratio(
    params: DenoiserParams, traj: Trajectory, step: int, sampler: SamplerConfig, schedule: NoiseSchedule
) -> float:
    """p_theta(x_{t-1} | x_t, c) / p_old(...) for transition ``step`` of ``traj``, via log space."""
    t, t_prev = int(traj.timesteps[step]), int(traj.timesteps[step + 1])
    x_t, x_prev = traj.states[step], traj.states[step + 1]
    eps_hat = predict_eps(params, x_t, t, traj.context_embed, sampler.guidance_scale, schedule)[0]
    mu, sigma = reverse_step_params(eps_hat, x_t, t, t_prev, schedule, sampler.eta)
    logp = gaussian_log_prob(x_prev, mu, sigma)
    log_w = logp - traj.log_probs[step]
    if not math.isfinite(log_w):
        raise FloatingPointError(f"non-finite log-ratio at transition {step} (t={t}) of trajectory seed {traj.seed}")
    return math.exp(log_w)


def clip_term(eps: float, adv):
    """(1 + eps) A for A >= 0, (1 - eps) A otherwise."""
    adv = np.asarray(adv, dtype=np.float64)
    out = np.where(adv >= 0, (1.0 + eps) * adv, (1.0 - eps) * adv)
    return float(out) if out.ndim == 0 else out


def transition_log_probs(
    graph: Graph, pn: ParamNodes, batch: RolloutBatch, step: int, sampler: SamplerConfig, schedule: NoiseSchedule
) -> Node:
    ts = batch.timesteps
    node = transition_log_prob_graph(
        graph, pn, batch.states[:, step], batch.states[:, step + 1], int(ts[step]), int(ts[step + 1]),
        batch.embeds, sampler, schedule,
    )
    if not np.all(np.isfinite(node.value)):
        bad = int(np.flatnonzero(~np.isfinite(node.value))[0])
        raise FloatingPointError(f"non-finite log-prob at transition {step} of trajectory {bad}")
    return node


def ppo_objective(
    graph: Graph,
    pn: ParamNodes,
    batch: RolloutBatch,
    config: TrainConfig,
    selected_steps: Sequence[int],
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
) -> Node:
    """-J: negative mean over trajectories and selected steps of min(w * A, g(eps, A))."""
    if len(selected_steps) == 0:
        raise ValueError("ppo_objective: no timesteps selected")
    adv = batch.advantages.advantages
    adv_node = graph.const(adv)
    bound = graph.const(clip_term(config.clip_epsilon, adv))
    total = None
    for k in selected_steps:
        logp = transition_log_probs(graph, pn, batch, int(k), sampler, schedule)
        ratio = graph.exp(graph.sub(logp, graph.const(batch.log_probs[:, k])))
        term = graph.sum(graph.minimum(graph.mul(ratio, adv_node), bound))
        total = term if total is None else graph.add(total, term)
    return graph.scale(total, -1.0 / (len(batch) * len(selected_steps)))


def total_loss(graph: Graph, ppo_loss: Node, pretrain_loss: Node, beta: float) -> Node:
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return graph.add(ppo_loss, graph.scale(pretrain_loss, beta))


def _rng_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("rollout", "timesteps", "pretrain")
    return {n: np.random.default_rng(s) for n, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


@dataclass
class TrainerState:
    params: DenoiserParams
    params_old: DenoiserParams
    opt: AdamWState
    iteration: int
    rngs: dict[str, np.random.Generator]
    running_stats: RunningStats = field(default_factory=RunningStats)
    clip_events: int = 0

    @classmethod
    def fresh(cls, params: DenoiserParams, seed: int) -> "TrainerState":
        return cls(params.copy(), params.copy(), AdamWState.zeros(params.size), 0, _rng_streams(seed))


def optimizer_step(state: TrainerState, graph: Graph, pn: ParamNodes, loss: Node, config: TrainConfig) -> float:
    value, grads = forward_backward(graph, loss)
    if not math.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite loss at iteration {state.iteration}",
            {"iteration": state.iteration, "loss": value, "params": state.params.flat()},
        )
    g = pn.flat_grad(grads)
    frozen = state.params.context_mask() if config.freeze_context_embedding else None
    if frozen is not None:
        g[frozen] = 0.0
    g, clipped = clip_global_norm(g, config.grad_clip)
    state.clip_events += int(clipped)
    old = state.params.flat()
    flat, state.opt = adamw_step(old, g, state.opt, config.lr, config.weight_decay)
    if frozen is not None:
        flat[frozen] = old[frozen]
    state.params = state.params.with_flat(flat)
    return value


def pretrain_step(
    state: TrainerState, data: PretrainData, world: WorldSpec, config: TrainConfig, schedule: NoiseSchedule, weight: float
) -> float:
    """One optimizer step on weight * L_pre over a random batch; returns the unweighted loss."""
    rng = state.rngs["pretrain"]
    idx = rng.integers(0, len(data), size=config.pretrain_batch_size)
    graph = Graph()
    pn = ParamNodes(graph, state.params)
    pre = pretraining_loss(graph, pn, data.x0[idx], world.embed_many([data.contexts[i] for i in idx]),
                           schedule, config.context_dropout, rng)
    raw = float(pre.value)
    optimizer_step(state, graph, pn, graph.scale(pre, weight), config)
    return raw


def _task_metrics(binding: TaskBinding, batch: RolloutBatch, it: int, ppo_losses: list[float]) -> MetricsRow:
    mean_r = float(np.mean(batch.rewards))
    row = MetricsRow(it, binding.name, mean_r, loss_ppo=float(np.mean(ppo_losses)))
    if binding.reward.kind == "diversity":
        row.statistical_parity = -mean_r
    elif binding.reward.kind == "composition":
        row.detection_seen = mean_r
    return row


def train_iteration(
    state: TrainerState,
    tasks: Sequence[TaskBinding],
    pretrain_data: PretrainData | None,
    world: WorldSpec,
    config: TrainConfig,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
) -> list[MetricsRow]:
    start = time.perf_counter()
    state.params_old = state.params.copy()
    K = sampler.num_inference_steps
    rows = []
    for binding in tasks:
        batch = collect_rollouts(
            state.params_old, binding, world, config, sampler, schedule, state.rngs["rollout"], state.running_stats
        )
        steps = state.rngs["timesteps"].choice(K, size=config.timesteps_per_iteration, replace=False)
        losses = []
        for k in steps:
            graph = Graph()
            pn = ParamNodes(graph, state.params)
            losses.append(optimizer_step(state, graph, pn, ppo_objective(graph, pn, batch, config, [int(k)], sampler, schedule), config))
        rows.append(_task_metrics(binding, batch, state.iteration, losses))
    pre_loss = None
    if config.beta_pretrain > 0 and pretrain_data is not None:
        pre_loss = pretrain_step(state, pretrain_data, world, config, schedule, config.beta_pretrain)
    wall = time.perf_counter() - start if config.record_wall_time else 0.0
    for r in rows:
        r.loss_pretrain = pre_loss
        r.wall_seconds = wall
    state.iteration += 1
    return rows


def train(
    config: TrainConfig,
    tasks: Sequence[TaskBinding],
    pretrain_data: PretrainData | None,
    world: WorldSpec,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
    init: DenoiserParams | TrainerState,
    on_iteration: Callable[[TrainerState, list[MetricsRow]], None] | None = None,
) -> tuple[TrainerState, list[MetricsRow]]:
    """Run up to ``config.max_iterations`` outer iterations (resuming from a TrainerState if given)."""
    config.validate(sampler)
    state = init if isinstance(init, TrainerState) else TrainerState.fresh(init, config.seed)
    metrics: list[MetricsRow] = []
    while state.iteration < config.max_iterations:
        rows = train_iteration(state, tasks, pretrain_data, world, config, sampler, schedule)
        metrics += rows
        if on_iteration is not None:
            on_iteration(state, rows)
    return state, metrics
