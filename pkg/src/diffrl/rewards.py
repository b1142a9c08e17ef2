from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tasks import AttributeSpec, Context, WorldSpec, classify_attribute, detect, detect_batch

ADV_EPS = 1e-8
PAPER_MINIBATCH = 16


def _require(ctx: Context, kind: str) -> None:
    if ctx.kind != kind:
        raise ValueError(f"{kind} reward applied to a {ctx.kind} context")


def preference_reward(x0, ctx: Context, world: WorldSpec) -> float:
    """Analytic preference proxy: Gaussian kernel around the prompt's shifted mean."""
    _require(ctx, "preference")
    diff = np.asarray(x0, dtype=np.float64) - world.pref_target(ctx.ids[0])
    return float(math.exp(-float(diff @ diff) / (2.0 * world.pref_tau**2)))


def composition_reward(x0, ctx: Context, world: WorldSpec) -> float:
    """Mean detector confidence over the objects named in the prompt."""
    _require(ctx, "composition")
    objects = world.objects()
    return float(np.mean([detect(objects[o], x0) for o in ctx.objects]))


def composition_rewards(x0: np.ndarray, contexts: Sequence[Context], world: WorldSpec) -> np.ndarray:
    for c in contexts:
        _require(c, "composition")
    objects = world.objects()
    centers = np.array([o.center for o in objects])
    widths = np.array([o.width for o in objects])
    a = np.array([c.ids[0] for c in contexts])
    b = np.array([c.ids[1] for c in contexts])
    return 0.5 * (detect_batch(centers[a], widths[a], x0) + detect_batch(centers[b], widths[b], x0))


def preference_rewards(x0: np.ndarray, contexts: Sequence[Context], world: WorldSpec) -> np.ndarray:
    for c in contexts:
        _require(c, "preference")
    targets = np.stack([world.pref_target(c.ids[0]) for c in contexts])
    d2 = np.sum((x0 - targets) ** 2, axis=1)
    return np.exp(-d2 / (2.0 * world.pref_tau**2))


def statistical_parity(labels: Sequence[int], num_bins: int) -> float:
    """L2 distance between the empirical label histogram and the uniform distribution."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("statistical_parity: empty label list")
    if labels.min() < 0 or labels.max() >= num_bins:
        raise ValueError(f"labels must lie in [0, {num_bins})")
    hist = np.bincount(labels, minlength=num_bins) / labels.size
    return float(np.sqrt(np.sum((hist - 1.0 / num_bins) ** 2)))


def diversity_reward(minibatch: np.ndarray, attr: AttributeSpec) -> np.ndarray:
    """Negated parity of the minibatch, broadcast to every member."""
    minibatch = np.atleast_2d(np.asarray(minibatch, dtype=np.float64))
    if minibatch.shape[0] < 2:
        raise ValueError("diversity_reward needs a minibatch of at least 2 samples")
    value = -statistical_parity(classify_attribute(minibatch, attr), attr.num_bins)
    return np.full(minibatch.shape[0], value)


@dataclass(frozen=True)
class RewardBinding:
    """Which reward a task uses; distributional bindings score minibatches of ``minibatch_size``."""

    kind: str  # "preference" | "composition" | "diversity"
    minibatch_size: int = 0

    @property
    def distributional(self) -> bool:
        return self.kind == "diversity"

    def validate(self, world: WorldSpec) -> None:
        if self.kind not in ("preference", "composition", "diversity"):
            raise ValueError(f"unknown reward {self.kind!r}")
        if self.distributional and self.minibatch_size < world.attribute.num_bins:
            raise ValueError(
                f"diversity minibatch size {self.minibatch_size} is below the {world.attribute.num_bins} attribute bins"
            )

    def score(self, x0: np.ndarray, contexts: Sequence[Context], world: WorldSpec) -> np.ndarray:
        """Rewards for rows of ``x0``. Distributional rewards treat consecutive blocks as minibatches."""
        if self.kind == "preference":
            return preference_rewards(x0, contexts, world)
        if self.kind == "composition":
            return composition_rewards(x0, contexts, world)
        m = self.minibatch_size
        if x0.shape[0] % m:
            raise ValueError(f"{x0.shape[0]} samples do not split into minibatches of {m}")
        return np.concatenate([diversity_reward(x0[i : i + m], world.attribute) for i in range(0, x0.shape[0], m)])


@dataclass
class AdvantageBatch:
    advantages: np.ndarray
    mean: float | np.ndarray
    std: float | np.ndarray
    mode: str


@dataclass
class RunningStats:
    """Per-prompt Welford accumulators: key -> [count, mean, M2]."""

    table: dict[str, list[float]] = field(default_factory=dict)

    def update(self, key: str, value: float) -> None:
        count, mean, m2 = self.table.get(key, [0, 0.0, 0.0])
        count += 1
        delta = value - mean
        mean += delta / count
        m2 += delta * (value - mean)
        self.table[key] = [count, mean, m2]

    def stats(self, key: str) -> tuple[int, float, float]:
        count, mean, m2 = self.table.get(key, [0, 0.0, 0.0])
        var = m2 / count if count else 0.0
        return int(count), mean, var


def normalize_advantages(
    rewards: Sequence[float],
    mode: str = "batch",
    running_stats: RunningStats | None = None,
    keys: Sequence[str] | None = None,
    groups: Sequence[int] | None = None,
) -> AdvantageBatch:
    """(r - mean) / sqrt(var + 1e-8) with population variance.

    ``mode="batch"`` uses the statistics of this batch. When ``groups`` is given
    (minibatch ids for distributional rewards) the statistics come from one
    value per group. ``mode="prompt"`` streams each reward into its prompt's
    running statistics first; prompts seen fewer than twice get advantage 0.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if mode == "batch":
        if r.size < 2:
            raise ValueError("per-batch normalization needs at least 2 rewards")
        if groups is not None:
            groups = np.asarray(groups)
            _, first = np.unique(groups, return_index=True)
            basis = r[np.sort(first)]
        else:
            basis = r
        mu = float(basis.mean())
        var = float(np.mean((basis - mu) ** 2))
        return AdvantageBatch((r - mu) / math.sqrt(var + ADV_EPS), mu, math.sqrt(var), "batch")
    if mode == "prompt":
        if running_stats is None or keys is None or len(keys) != r.size:
            raise ValueError("per-prompt normalization needs running_stats and one key per reward")
        for k, v in zip(keys, r):
            running_stats.update(k, float(v))
        adv, mus, sds = np.zeros_like(r), np.zeros_like(r), np.zeros_like(r)
        for i, (k, v) in enumerate(zip(keys, r)):
            count, mu, var = running_stats.stats(k)
            mus[i], sds[i] = mu, math.sqrt(var)
            if count >= 2:
                adv[i] = (v - mu) / math.sqrt(var + ADV_EPS)
        return AdvantageBatch(adv, mus, sds, "prompt")
    raise ValueError(f"unknown normalization mode {mode!r}")
