"""Noise schedule, guided DDIM sampler with exact Gaussian log-probs, and the eps-prediction loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .autodiff import Graph, Node
from .model import DenoiserParams, ParamNodes, mlp_forward, mlp_graph, time_embedding

X0_CLAMP = 3.0
PAPER_GUIDANCE_SCALE = 7.0
LOG_2PI = math.log(2.0 * math.pi)


class DegenerateVarianceError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def abar(self, t) -> np.ndarray | float:
        """Cumulative signal retention at t, with the t = 0 convention abar = 1."""
        t_arr = np.asarray(t)
        if np.any(t_arr < 0) or np.any(t_arr > self.T):
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bar])
        out = padded[t_arr]
        return float(out) if out.ndim == 0 else out


def build_schedule(T: int = 100, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, T)
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha))


def schedule_from_betas(beta: Sequence[float]) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 2 or np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("betas must be a 1-D array of at least 2 values in (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(beta.size, beta, alpha, np.cumprod(alpha))


@dataclass(frozen=True)
class SamplerConfig:
    num_inference_steps: int = 50
    eta: float = 1.0
    guidance_scale: float = 1.5

    def validate(self, schedule: NoiseSchedule) -> None:
        if not 1 <= self.num_inference_steps < schedule.T:
            raise ValueError(
                f"num_inference_steps must be in [1, {schedule.T - 1}] for T={schedule.T}, "
                f"got {self.num_inference_steps}"
            )
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if self.guidance_scale < 0:
            raise ValueError(f"guidance_scale must be >= 0, got {self.guidance_scale}")


def inference_timesteps(schedule: NoiseSchedule, num_steps: int) -> np.ndarray:
    """Evenly spaced integer timesteps T = t_K > ... > t_0 = 1 (K + 1 entries).

    The chain stops at t = 1 rather than 0 so every transition keeps a positive
    variance (abar_0 = 1 would make the last step deterministic).
    """
    ts = np.rint(np.linspace(schedule.T, 1, num_steps + 1)).astype(np.int64)
    if np.any(np.diff(ts) >= 0):
        raise ValueError(f"{num_steps} steps do not fit in T={schedule.T}")
    return ts


def forward_noise(x0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.abar(t)
    return math.sqrt(ab) * np.asarray(x0, dtype=np.float64) + math.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def predict_eps(params: DenoiserParams, x_t, t, context_embed, guidance_scale: float, schedule: NoiseSchedule) -> np.ndarray:
    """Classifier-free guided prediction: eps(null) + w * (eps(c) - eps(null))."""
    x_t = np.atleast_2d(x_t)
    n = x_t.shape[0]
    temb = time_embedding(np.broadcast_to(t, (n,)), schedule.T)
    cemb = np.broadcast_to(np.atleast_2d(context_embed), (n, params.context_dim))
    if guidance_scale == 1.0:
        return mlp_forward(params, x_t, temb, cemb)
    uncond = mlp_forward(params, x_t, temb, np.zeros_like(cemb))
    if guidance_scale == 0.0:
        return uncond
    cond = mlp_forward(params, x_t, temb, cemb)
    return uncond + guidance_scale * (cond - uncond)


def predict_eps_graph(
    graph: Graph, pn: ParamNodes, x_t: Node, t, context_embed: np.ndarray, guidance_scale: float, schedule: NoiseSchedule
) -> Node:
    n = x_t.shape[0]
    temb = time_embedding(np.broadcast_to(t, (n,)), schedule.T)
    cemb = np.broadcast_to(np.atleast_2d(context_embed), (n, pn.params.context_dim))
    if guidance_scale == 1.0:
        return mlp_graph(graph, pn, x_t, temb, cemb)
    uncond = mlp_graph(graph, pn, x_t, temb, np.zeros_like(cemb))
    if guidance_scale == 0.0:
        return uncond
    cond = mlp_graph(graph, pn, x_t, temb, cemb)
    return graph.add(uncond, graph.scale(graph.sub(cond, uncond), guidance_scale))


@dataclass(frozen=True)
class StepCoefficients:
    """mu = c_x0 * clamp((x_t - c_eps_in * eps) / sqrt_abar_t) + c_dir * eps."""

    sqrt_abar_t: float
    c_eps_in: float
    c_x0: float
    c_dir: float
    sigma: float


def step_coefficients(t: int, t_prev: int, schedule: NoiseSchedule, eta: float) -> StepCoefficients:
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    ab_t = schedule.abar(t)
    ab_p = schedule.abar(t_prev)
    var = eta**2 * ((1.0 - ab_p) / (1.0 - ab_t)) * (1.0 - ab_t / ab_p) if ab_t < 1.0 else 0.0
    if var <= 0.0:
        var = 0.0
        if eta > 0:
            raise DegenerateVarianceError(f"zero policy variance at t={t} -> t_prev={t_prev} with eta={eta}")
    return StepCoefficients(
        sqrt_abar_t=math.sqrt(ab_t),
        c_eps_in=math.sqrt(1.0 - ab_t),
        c_x0=math.sqrt(ab_p),
        c_dir=math.sqrt(max(1.0 - ab_p - var, 0.0)),
        sigma=math.sqrt(var),
    )


def reverse_step_params(eps_hat, x_t, t: int, t_prev: int, schedule: NoiseSchedule, eta: float, clamp: float = X0_CLAMP):
    """DDIM update: returns the Gaussian policy mean and its (isotropic) standard deviation."""
    k = step_coefficients(t, t_prev, schedule, eta)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    x0_hat = (np.asarray(x_t, dtype=np.float64) - k.c_eps_in * eps_hat) / k.sqrt_abar_t
    x0_hat = np.clip(x0_hat, -clamp, clamp)
    return k.c_x0 * x0_hat + k.c_dir * eps_hat, k.sigma


def reverse_mean_graph(graph: Graph, eps_hat: Node, x_t: np.ndarray, k: StepCoefficients, clamp: float = X0_CLAMP) -> Node:
    x0_hat = graph.scale(graph.sub(graph.const(x_t), graph.scale(eps_hat, k.c_eps_in)), 1.0 / k.sqrt_abar_t)
    x0_hat = graph.clip(x0_hat, -clamp, clamp)
    return graph.add(graph.scale(x0_hat, k.c_x0), graph.scale(eps_hat, k.c_dir))


def gaussian_log_prob(x, mu, sigma: float):
    """Isotropic normal log-density summed over the last axis (float for 1-D input)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    diff = np.asarray(x, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    d = diff.shape[-1] if diff.ndim else 1
    out = -0.5 * np.sum(diff * diff, axis=-1) / (sigma * sigma) - d * (math.log(sigma) + 0.5 * LOG_2PI)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class Trajectory:
    context: Any
    context_embed: np.ndarray
    timesteps: np.ndarray  # (K + 1,) descending, t_K .. t_0
    states: np.ndarray  # (K + 1, d), states[0] = x_T, states[-1] = final sample
    log_probs: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    stds: np.ndarray  # (K,)
    seed: int
    reward: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def x0(self) -> np.ndarray:
        return self.states[-1]

    @property
    def num_transitions(self) -> int:
        return len(self.log_probs)


def _seed_noise(seed: int, steps: int, dim: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((steps + 1, dim))


def sample_trajectories(
    params: DenoiserParams,
    contexts: Sequence[Any],
    context_embeds: np.ndarray,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    seeds: Sequence[int],
) -> list[Trajectory]:
    """Batched rollout of the guided reverse chain.

    Trajectory i depends only on (params, context i, seed i), up to last-bit
    rounding differences between batched and unbatched matmuls.
    """
    config.validate(schedule)
    if config.eta <= 0:
        raise DegenerateVarianceError("trajectory sampling for RL needs eta > 0")
    n = len(seeds)
    cemb = np.atleast_2d(np.asarray(context_embeds, dtype=np.float64))
    ts = inference_timesteps(schedule, config.num_inference_steps)
    K, d = len(ts) - 1, params.sample_dim
    noise = np.stack([_seed_noise(int(s), K, d) for s in seeds], axis=1)  # (K + 1, n, d)
    states = np.empty((K + 1, n, d))
    means = np.empty((K, n, d))
    stds = np.empty(K)
    logp = np.empty((K, n))
    x = noise[0]
    states[0] = x
    for k in range(K):
        t, t_prev = int(ts[k]), int(ts[k + 1])
        eps_hat = predict_eps(params, x, t, cemb, config.guidance_scale, schedule)
        mu, sigma = reverse_step_params(eps_hat, x, t, t_prev, schedule, config.eta)
        x = mu + sigma * noise[k + 1]
        states[k + 1], means[k], stds[k] = x, mu, sigma
        logp[k] = gaussian_log_prob(x, mu, sigma)
    return [
        Trajectory(
            context=contexts[i],
            context_embed=cemb[i].copy(),
            timesteps=ts.copy(),
            states=states[:, i].copy(),
            log_probs=logp[:, i].copy(),
            means=means[:, i].copy(),
            stds=stds.copy(),
            seed=int(seeds[i]),
        )
        for i in range(n)
    ]


def sample_trajectory(params, context, context_embed, config: SamplerConfig, schedule: NoiseSchedule, rng) -> Trajectory:
    seed = int(np.random.default_rng(rng).integers(2**63 - 1))
    return sample_trajectories(params, [context], np.atleast_2d(context_embed), config, schedule, [seed])[0]


def generate(
    params: DenoiserParams, context_embeds: np.ndarray, config: SamplerConfig, schedule: NoiseSchedule, seeds: Sequence[int]
) -> np.ndarray:
    """Final samples only; eta = 0 (deterministic DDIM) allowed."""
    config.validate(schedule)
    cemb = np.atleast_2d(np.asarray(context_embeds, dtype=np.float64))
    ts = inference_timesteps(schedule, config.num_inference_steps)
    K, d = len(ts) - 1, params.sample_dim
    noise = np.stack([_seed_noise(int(s), K, d) for s in seeds], axis=1)
    x = noise[0]
    for k in range(K):
        t, t_prev = int(ts[k]), int(ts[k + 1])
        eps_hat = predict_eps(params, x, t, cemb, config.guidance_scale, schedule)
        mu, sigma = reverse_step_params(eps_hat, x, t, t_prev, schedule, config.eta)
        x = mu + sigma * noise[k + 1]
    return x


def transition_log_prob_graph(
    graph: Graph, pn: ParamNodes, x_t: np.ndarray, x_prev: np.ndarray, t: int, t_prev: int,
    context_embeds: np.ndarray, sampler: SamplerConfig, schedule: NoiseSchedule,
) -> Node:
    """Per-row log p_theta(x_prev | x_t, c) as a graph node of shape (n,)."""
    k = step_coefficients(t, t_prev, schedule, sampler.eta)
    eps_hat = predict_eps_graph(graph, pn, graph.const(x_t), t, context_embeds, sampler.guidance_scale, schedule)
    mu = reverse_mean_graph(graph, eps_hat, x_t, k)
    sq = graph.sum_cols(graph.square(graph.sub(graph.const(x_prev), mu)))
    d = x_t.shape[1]
    return graph.add_scalar(graph.scale(sq, -0.5 / (k.sigma * k.sigma)), -d * (math.log(k.sigma) + 0.5 * LOG_2PI))


def pretraining_loss(
    graph: Graph,
    pn: ParamNodes,
    x0: np.ndarray,
    context_embeds: np.ndarray,
    schedule: NoiseSchedule,
    context_dropout_p: float,
    rng: np.random.Generator,
    weights: np.ndarray | None = None,
) -> Node:
    """Mean over the batch of ||eps - eps_theta(x_t, t, c)||^2 with t ~ U{1..T}.

    With ``weights`` the mean becomes sum(w_i * l_i) / sum(w_i).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    if n == 0:
        raise ValueError("pretraining_loss: empty batch")
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    drop = rng.random(n) < context_dropout_p
    cemb = np.where(drop[:, None], 0.0, np.atleast_2d(context_embeds))
    ab = schedule.abar(t)[:, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    pred = mlp_graph(graph, pn, graph.const(x_t), time_embedding(t, schedule.T), cemb)
    per_sample = graph.sum_cols(graph.square(graph.sub(graph.const(eps), pred)))
    if weights is None:
        return graph.mean(per_sample)
    weights = np.asarray(weights, dtype=np.float64)
    total = float(weights.sum())
    if total <= 0:
        raise ValueError("pretraining_loss: weights sum to zero")
    return graph.scale(graph.sum(graph.mul(per_sample, graph.const(weights))), 1.0 / total)
