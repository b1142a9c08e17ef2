"""Flat dotted-key run configuration, read from TOML and echoed back fully resolved."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import tomli

from .baselines import BaselineConfig
from .diffusion import NoiseSchedule, SamplerConfig, build_schedule
from .pretrain import PretrainConfig
from .rewards import RewardBinding
from .rl import TaskBinding, TrainConfig
from .tasks import AttributeSpec, TaskSpec, WorldSpec, split_objects


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out_dir": "runs/default",
    # synthetic world
    "world.num_objects": 10,
    "world.object_radius": 1.5,
    "world.object_width": 0.1,
    "world.jitter": 0.1,
    "world.caption_noise": 0.3,
    "world.num_styles": 24,
    "world.bias_ratio": 0.85,
    "world.attribute_centers": [-1.5, -0.5, 0.5, 1.5],
    "world.num_pref_prompts": 8,
    "world.pref_jitter": 0.2,
    "world.pref_tau": 0.5,
    "world.pref_offset": [0.75, 0.75],
    "world.n_composition": 4000,
    "world.n_portrait": 4000,
    "world.n_preference": 4000,
    # train / held-out splits
    "split.object_train_fraction": 0.8,
    "split.portrait_train_styles": 16,
    "split.pref_train_prompts": 6,
    # diffusion
    "schedule.T": 100,
    "schedule.beta_min": 1e-4,
    "schedule.beta_max": 0.02,
    "sampler.num_inference_steps": 50,
    "sampler.eta": 1.0,
    "sampler.guidance_scale": 1.5,
    "model.hidden": [64, 64],
    # base model
    "pretrain.steps": 4000,
    "pretrain.batch_size": 256,
    "pretrain.lr": 2e-3,
    "pretrain.lr_final": 1e-4,
    "pretrain.context_dropout": 0.1,
    # fine-tuning
    "finetune.method": "rl",
    "finetune.tasks": ["preference"],
    "finetune.checkpoint_every": 0,
    "tasks.fairness_minibatch": 16,
    "tasks.fairness_prompts": 8,
    "rl.clip_epsilon": 1e-4,
    "rl.timesteps_per_iteration": 5,
    "rl.beta_pretrain": 0.1,
    "rl.lr": 1e-4,
    "rl.weight_decay": 1e-2,
    "rl.grad_clip": 1.0,
    "rl.prompts_per_iteration": 16,
    "rl.samples_per_prompt": 8,
    "rl.pretrain_batch_size": 64,
    "rl.context_dropout": 0.1,
    "rl.norm_mode": "batch",
    "rl.max_iterations": 100,
    "rl.freeze_context_embedding": True,
    "baseline.beta_rw": 0.5,
    "baseline.k": 24,
    "baseline.accept_count": 1,
    "baseline.prompts_per_iteration": 16,
    "baseline.samples_per_prompt": 8,
    "baseline.sample_eta": 0.0,
    "baseline.lr": 1e-4,
    "baseline.max_iterations": 100,
    "baseline.divergence_ratio": 0.5,
    # evaluation
    "eval.n_prompts": 16,
    "eval.samples_per_prompt": 64,
    "eval.seed": 1234,
    "eval.n_heldout_pretrain": 2048,
    "metrics.record_wall_time": False,
}

TASK_NAMES = ("preference", "fairness", "composition")
# keys that may change between a run and its resume without invalidating it
_UNHASHED = {"out_dir", "rl.max_iterations", "baseline.max_iterations", "finetune.checkpoint_every"}


def _flatten(doc: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        kinds = {type(x) for x in default}
        if kinds <= {int, float} and not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value):
            raise ConfigError(f"{key}: expected a list of numbers, got {value!r}")
        if kinds == {str} and not all(isinstance(x, str) for x in value):
            raise ConfigError(f"{key}: expected a list of strings, got {value!r}")
        return [float(x) for x in value] if float in kinds else list(value)
    raise ConfigError(f"{key}: unsupported value {value!r}")


class RunConfig:
    def __init__(self, values: dict[str, Any] | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)
        self.validate()

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            doc = tomli.loads(text)
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"config parse error: {e}") from e
        return cls(_flatten(doc))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_toml(Path(path).read_text(encoding="utf-8"))

    def set(self, key: str, value: Any) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, value)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        for task in v["finetune.tasks"]:
            if task not in TASK_NAMES:
                raise ConfigError(f"finetune.tasks: unknown task {task!r} (choose from {', '.join(TASK_NAMES)})")
        if v["finetune.method"] not in ("rl", "reward_weighted", "raft"):
            raise ConfigError(f"finetune.method: unknown method {v['finetune.method']!r}")
        if v["rl.norm_mode"] not in ("batch", "prompt"):
            raise ConfigError(f"rl.norm_mode: expected 'batch' or 'prompt', got {v['rl.norm_mode']!r}")
        if not 0 < v["split.portrait_train_styles"] < v["world.num_styles"]:
            raise ConfigError("split.portrait_train_styles: must leave at least one held-out style")
        if not 0 < v["split.pref_train_prompts"] < v["world.num_pref_prompts"]:
            raise ConfigError("split.pref_train_prompts: must leave at least one held-out prompt")
        try:
            self.world().validate()
            self.sampler().validate(self.schedule())
        except ValueError as e:
            raise ConfigError(str(e)) from e

    # rendering ----------------------------------------------------------
    def to_toml(self) -> str:
        lines = []
        for k in DEFAULTS:
            lines.append(f"{k} = {_toml_value(self.values[k])}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        payload = {k: v for k, v in self.values.items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    # builders -----------------------------------------------------------
    def world(self) -> WorldSpec:
        v = self.values
        return WorldSpec(
            num_objects=v["world.num_objects"],
            object_radius=v["world.object_radius"],
            object_width=v["world.object_width"],
            jitter=v["world.jitter"],
            caption_noise=v["world.caption_noise"],
            attribute=AttributeSpec(tuple(v["world.attribute_centers"])),
            num_styles=v["world.num_styles"],
            bias_ratio=v["world.bias_ratio"],
            num_pref_prompts=v["world.num_pref_prompts"],
            pref_jitter=v["world.pref_jitter"],
            pref_tau=v["world.pref_tau"],
            pref_offset=tuple(v["world.pref_offset"]),
            n_composition=v["world.n_composition"],
            n_portrait=v["world.n_portrait"],
            n_preference=v["world.n_preference"],
        )

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self["schedule.T"], self["schedule.beta_min"], self["schedule.beta_max"])

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self["sampler.num_inference_steps"], self["sampler.eta"], self["sampler.guidance_scale"])

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            steps=self["pretrain.steps"],
            batch_size=self["pretrain.batch_size"],
            lr=self["pretrain.lr"],
            lr_final=self["pretrain.lr_final"],
            context_dropout=self["pretrain.context_dropout"],
            hidden=tuple(self["model.hidden"]),
            seed=self["seed"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            clip_epsilon=v["rl.clip_epsilon"],
            timesteps_per_iteration=v["rl.timesteps_per_iteration"],
            beta_pretrain=v["rl.beta_pretrain"],
            lr=v["rl.lr"],
            weight_decay=v["rl.weight_decay"],
            grad_clip=v["rl.grad_clip"],
            prompts_per_iteration=v["rl.prompts_per_iteration"],
            samples_per_prompt=v["rl.samples_per_prompt"],
            pretrain_batch_size=v["rl.pretrain_batch_size"],
            context_dropout=v["rl.context_dropout"],
            norm_mode=v["rl.norm_mode"],
            max_iterations=v["rl.max_iterations"],
            seed=v["seed"],
            freeze_context_embedding=v["rl.freeze_context_embedding"],
            record_wall_time=v["metrics.record_wall_time"],
        )

    def baseline_config(self) -> BaselineConfig:
        v = self.values
        return BaselineConfig(
            method=v["finetune.method"],
            beta_rw=v["baseline.beta_rw"],
            k=v["baseline.k"],
            accept_count=v["baseline.accept_count"],
            prompts_per_iteration=v["baseline.prompts_per_iteration"],
            samples_per_prompt=v["baseline.samples_per_prompt"],
            sample_eta=v["baseline.sample_eta"],
            lr=v["baseline.lr"],
            weight_decay=v["rl.weight_decay"],
            grad_clip=v["rl.grad_clip"],
            context_dropout=v["rl.context_dropout"],
            max_iterations=v["baseline.max_iterations"],
            seed=v["seed"],
            freeze_context_embedding=v["rl.freeze_context_embedding"],
            divergence_ratio=v["baseline.divergence_ratio"],
        )

    def splits(self) -> "Splits":
        world = self.world()
        seen, unseen = split_objects(world.objects(), self["split.object_train_fraction"], self["seed"])
        ns, npref = self["split.portrait_train_styles"], self["split.pref_train_prompts"]
        return Splits(
            seen_objects=tuple(seen),
            unseen_objects=tuple(unseen),
            train_styles=tuple(range(ns)),
            heldout_styles=tuple(range(ns, world.num_styles)),
            train_pref=tuple(range(npref)),
            heldout_pref=tuple(range(npref, world.num_pref_prompts)),
        )

    def task_bindings(self, names=None) -> list[TaskBinding]:
        sp = self.splits()
        table = {
            "preference": TaskBinding("preference", TaskSpec("preference", sp.train_pref), RewardBinding("preference")),
            "fairness": TaskBinding(
                "fairness",
                TaskSpec("portrait", sp.train_styles),
                RewardBinding("diversity", self["tasks.fairness_minibatch"]),
                prompts_per_iteration=self["tasks.fairness_prompts"],
            ),
            "composition": TaskBinding("composition", TaskSpec("composition", sp.seen_objects), RewardBinding("composition")),
        }
        return [table[n] for n in (names or self["finetune.tasks"])]


class Splits:
    def __init__(self, **kw):
        self.__dict__.update(kw)

    def __repr__(self) -> str:
        return f"Splits({self.__dict__})"


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(v)
