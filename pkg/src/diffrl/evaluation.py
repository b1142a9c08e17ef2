"""Held-out metric suite. Every metric is a pure function of (generator, prompts, counts, seed)."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Graph
from .diffusion import NoiseSchedule, SamplerConfig, generate, pretraining_loss
from .model import DenoiserParams, ParamNodes
from .rewards import composition_rewards, preference_rewards, statistical_parity
from .tasks import NUM_RELATIONS, Context, PretrainData, WorldSpec, classify_attribute

# contexts, per-sample seeds -> (n, sample_dim) final samples
Generator = Callable[[Sequence[Context], np.ndarray], np.ndarray]

METRIC_ORDER = (
    "preference_reward",
    "statistical_parity",
    "detection_seen",
    "detection_unseen",
    "detection_score",
    "pretrain_loss",
)
LOWER_IS_BETTER = {"statistical_parity", "pretrain_loss"}
RELATIVE_METRICS = ("preference_reward", "statistical_parity", "detection_score")


def model_generator(params: DenoiserParams, world: WorldSpec, sampler: SamplerConfig, schedule: NoiseSchedule) -> Generator:
    def gen(contexts, seeds):
        return generate(params, world.embed_many(list(contexts)), sampler, schedule, seeds)

    return gen


def _seeds(seed: int, n: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 2**63 - 1, size=n)


def evaluate_parity(generator: Generator, world: WorldSpec, styles: Sequence[int],
                    n_samples_per_prompt: int = 64, n_prompts: int = 16, seed: int = 0) -> float:
    """Mean over prompts of per-prompt parity; prompt i uses style ``styles[i % len(styles)]``."""
    if not styles:
        raise ValueError("evaluate_parity: no held-out styles")
    prompts = [Context("portrait", (int(styles[i % len(styles)]),)) for i in range(n_prompts)]
    contexts = [c for c in prompts for _ in range(n_samples_per_prompt)]
    x0 = generator(contexts, _seeds(seed, len(contexts)))
    labels = classify_attribute(x0, world.attribute).reshape(n_prompts, n_samples_per_prompt)
    return float(np.mean([statistical_parity(row, world.attribute.num_bins) for row in labels]))


def _composition_prompts(pool: Sequence[int], n_prompts: int, rng: np.random.Generator) -> list[Context]:
    if len(pool) < 2:
        raise ValueError("composition prompts need at least 2 object classes")
    out = []
    for _ in range(n_prompts):
        a, b = rng.choice(np.asarray(pool), size=2, replace=False)
        out.append(Context("composition", (int(a), int(b), int(rng.integers(NUM_RELATIONS)))))
    return out


def evaluate_detection(generator: Generator, world: WorldSpec, seen: Sequence[int], unseen: Sequence[int],
                       n_per_prompt: int = 64, n_prompts: int = 16, seed: int = 0) -> tuple[float, float]:
    """Mean composition reward on prompts built from seen classes and, separately, from held-out classes only."""
    rng = np.random.default_rng(seed)
    scores = []
    for pool in (seen, unseen):
        prompts = _composition_prompts(pool, n_prompts, rng)
        contexts = [c for c in prompts for _ in range(n_per_prompt)]
        x0 = generator(contexts, rng.integers(0, 2**63 - 1, size=len(contexts)))
        scores.append(float(np.mean(composition_rewards(x0, contexts, world))))
    return scores[0], scores[1]


def evaluate_preference(generator: Generator, world: WorldSpec, prompts: Sequence[int],
                        n_per_prompt: int = 64, n_prompts: int = 16, seed: int = 0) -> float:
    if not prompts:
        raise ValueError("evaluate_preference: no prompts")
    ctx = [Context("preference", (int(prompts[i % len(prompts)]),)) for i in range(n_prompts)]
    contexts = [c for c in ctx for _ in range(n_per_prompt)]
    x0 = generator(contexts, _seeds(seed, len(contexts)))
    return float(np.mean(preference_rewards(x0, contexts, world)))


def heldout_pretrain_loss(params: DenoiserParams, data: PretrainData, world: WorldSpec,
                          schedule: NoiseSchedule, seed: int = 0) -> float:
    """Noise-prediction loss on ``data`` with fixed (seeded) timesteps and noise, no context dropout."""
    graph = Graph()
    pn = ParamNodes(graph, params)
    loss = pretraining_loss(graph, pn, data.x0, world.embed_many(data.contexts), schedule, 0.0,
                            np.random.default_rng(seed))
    return float(loss.value)


def evaluate_all(params: DenoiserParams, world: WorldSpec, sampler: SamplerConfig, schedule: NoiseSchedule, splits,
                 heldout: PretrainData, n_prompts: int = 16, n_per_prompt: int = 64, seed: int = 0) -> dict[str, float]:
    gen = model_generator(params, world, sampler, schedule)
    seen, unseen = evaluate_detection(gen, world, splits.seen_objects, splits.unseen_objects, n_per_prompt, n_prompts, seed + 2)
    out = {
        "preference_reward": evaluate_preference(gen, world, splits.heldout_pref, n_per_prompt, n_prompts, seed),
        "statistical_parity": evaluate_parity(gen, world, splits.heldout_styles, n_per_prompt, n_prompts, seed + 1),
        "detection_seen": seen,
        "detection_unseen": unseen,
        "detection_score": 0.5 * (seen + unseen),
        "pretrain_loss": heldout_pretrain_loss(params, heldout, world, schedule, seed + 3),
    }
    return {k: out[k] for k in METRIC_ORDER}


def evaluate_relative(joint: dict, specialist: dict, base: dict) -> dict[str, float | None]:
    """Fraction of each specialist's gain over base recovered by the joint model; None when undefined."""
    if not (set(joint) == set(specialist) == set(base)):
        raise ValueError(
            f"metric sets differ: joint {sorted(joint)}, specialist {sorted(specialist)}, base {sorted(base)}"
        )
    out: dict[str, float | None] = {}
    for k in joint:
        if specialist[k] == base[k]:
            out[k] = None
        elif k in LOWER_IS_BETTER:
            out[k] = (base[k] - joint[k]) / (base[k] - specialist[k])
        else:
            out[k] = (joint[k] - base[k]) / (specialist[k] - base[k])
    return out


# on-disk evaluation records ------------------------------------------------

def write_eval(path, label: str, metrics: dict[str, float], checkpoint: str = "") -> None:
    record = {"label": label, "checkpoint": checkpoint, "metrics": {k: metrics[k] for k in metrics}}
    Path(path).write_text(json.dumps(record, indent=2) + "\n")


def read_eval(path) -> dict:
    record = json.loads(Path(path).read_text())
    if "label" not in record or "metrics" not in record:
        raise ValueError(f"{path}: not an evaluation record")
    return record


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    return f"{v:.4f}"


def render_table(records: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    """Plain-text table: one row per record in input order, columns in fixed metric order."""
    if not records:
        raise ValueError("nothing to compare")
    if columns is None:
        keys = set().union(*(r["metrics"] for r in records))
        columns = [k for k in METRIC_ORDER if k in keys] + sorted(keys - set(METRIC_ORDER))
    rows = [["model", *columns]] + [[r["label"], *(_fmt(r["metrics"].get(c)) for c in columns)] for r in records]
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
