"""Synthetic scenes for the three task families, with analytic detector and attribute classifier.

A sample is a flat vector of ``num_slots`` 2-D points. Composition scenes put
one object per slot, portrait scenes carry the sensitive attribute on the
first coordinate of slot 0, and preference scenes sit around a per-prompt mean.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

TASK_KINDS = ("composition", "portrait", "preference")
NUM_RELATIONS = 5
RELATION_WORDS = ("and", "next to", "near", "on side of", "beside")
DATA_BOX = 2.0


@dataclass(frozen=True)
class ObjectClass:
    id: int
    center: tuple[float, float]
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"object {self.id}: width must be > 0")


@dataclass(frozen=True)
class AttributeSpec:
    centers: tuple[float, ...] = (-1.5, -0.5, 0.5, 1.5)

    def __post_init__(self):
        if len(self.centers) < 2:
            raise ValueError("need at least 2 attribute bins")
        if any(b <= a for a, b in zip(self.centers, self.centers[1:])):
            raise ValueError(f"attribute centers must be strictly increasing: {self.centers}")

    @property
    def num_bins(self) -> int:
        return len(self.centers)


@dataclass(frozen=True)
class Context:
    """A prompt. ``ids`` is (a, b, relation) for composition, (style,) for portrait, (prompt,) for preference."""

    kind: str
    ids: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "composition":
            a, b, rel = self.ids
            if a == b:
                raise ValueError(f"composition objects must differ, got ({a}, {b})")
            if not 0 <= rel < NUM_RELATIONS:
                raise ValueError(f"relation id {rel} outside 0..{NUM_RELATIONS - 1}")

    @property
    def objects(self) -> tuple[int, int]:
        if self.kind != "composition":
            raise ValueError(f"{self.kind} context has no objects")
        return self.ids[0], self.ids[1]

    @property
    def key(self) -> str:
        return f"{self.kind}:{'-'.join(map(str, self.ids))}"


@dataclass
class WorldSpec:
    """Geometry and sizes of the synthetic data world."""

    num_objects: int = 10
    object_radius: float = 1.5
    object_width: float = 0.1
    num_slots: int = 2
    jitter: float = 0.1
    caption_noise: float = 0.3
    attribute: AttributeSpec = field(default_factory=AttributeSpec)
    num_styles: int = 24
    bias_ratio: float = 0.85
    num_pref_prompts: int = 8
    pref_jitter: float = 0.2
    pref_tau: float = 0.5
    pref_offset: tuple[float, float] = (0.75, 0.75)
    n_composition: int = 4000
    n_portrait: int = 4000
    n_preference: int = 4000

    def validate(self) -> None:
        if self.num_objects < 2:
            raise ValueError("need at least 2 object classes")
        if self.num_slots != 2:
            raise ValueError("scenes have exactly 2 slots")
        if not 0.0 < self.bias_ratio < 1.0:
            raise ValueError(f"bias_ratio must be in (0, 1), got {self.bias_ratio}")
        if self.num_styles < 1 or self.num_pref_prompts < 1:
            raise ValueError("need at least one portrait style and one preference prompt")

    @property
    def sample_dim(self) -> int:
        return 2 * self.num_slots

    def objects(self) -> list[ObjectClass]:
        out = []
        for i in range(self.num_objects):
            ang = 2.0 * math.pi * i / self.num_objects
            out.append(ObjectClass(i, (self.object_radius * math.cos(ang), self.object_radius * math.sin(ang)), self.object_width))
        return out

    # context embeddings -------------------------------------------------
    def local_dim(self, kind: str) -> int:
        return {
            "composition": 2 * self.num_objects + NUM_RELATIONS,
            "portrait": self.num_styles,
            "preference": self.num_pref_prompts,
        }[kind]

    @property
    def context_dim(self) -> int:
        return sum(self.local_dim(k) for k in TASK_KINDS)

    def _offset(self, kind: str) -> int:
        return sum(self.local_dim(k) for k in TASK_KINDS[: TASK_KINDS.index(kind)])

    def local_embedding(self, ctx: Context) -> np.ndarray:
        v = np.zeros(self.local_dim(ctx.kind))
        if ctx.kind == "composition":
            a, b, rel = ctx.ids
            v[a] = 1.0
            v[self.num_objects + b] = 1.0
            v[2 * self.num_objects + rel] = 1.0
        else:
            v[ctx.ids[0]] = 1.0
        return v

    def embed(self, ctx: Context) -> np.ndarray:
        """Model-facing embedding: the task's one-hot block placed in the shared layout (zeros elsewhere)."""
        v = np.zeros(self.context_dim)
        off = self._offset(ctx.kind)
        v[off : off + self.local_dim(ctx.kind)] = self.local_embedding(ctx)
        return v

    def embed_many(self, contexts: Sequence[Context]) -> np.ndarray:
        return np.stack([self.embed(c) for c in contexts]) if contexts else np.zeros((0, self.context_dim))

    # task geometry ------------------------------------------------------
    def style_layout(self, style: int) -> np.ndarray:
        """Non-attribute coordinates for a portrait style: (slot0 y, slot1 x, slot1 y)."""
        ang = 2.0 * math.pi * style / self.num_styles
        return np.array([0.8 * math.sin(ang), 1.2 * math.cos(ang), 1.2 * math.sin(ang)])

    def pref_mean(self, prompt: int) -> np.ndarray:
        ang = 2.0 * math.pi * prompt / self.num_pref_prompts
        s0 = 0.6 * np.array([math.cos(ang), math.sin(ang)])
        return np.concatenate([s0, -s0])

    def pref_target(self, prompt: int) -> np.ndarray:
        target = self.pref_mean(prompt)
        target[:2] += np.asarray(self.pref_offset)
        return target

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attribute"] = list(self.attribute.centers)
        d["pref_offset"] = list(self.pref_offset)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        d["attribute"] = AttributeSpec(tuple(d["attribute"]))
        d["pref_offset"] = tuple(d["pref_offset"])
        return cls(**d)


@dataclass(frozen=True)
class SceneSample:
    x0: np.ndarray
    context: Context
    attribute_bin: int = -1


@dataclass
class PretrainData:
    contexts: list[Context]
    x0: np.ndarray
    attribute_bins: np.ndarray

    def __len__(self) -> int:
        return len(self.contexts)

    def __getitem__(self, i: int) -> tuple[Context, SceneSample]:
        return self.contexts[i], SceneSample(self.x0[i], self.contexts[i], int(self.attribute_bins[i]))

    def __iter__(self) -> Iterator[tuple[Context, SceneSample]]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "PretrainData":
        idx = np.asarray(idx)
        return PretrainData([self.contexts[i] for i in idx], self.x0[idx], self.attribute_bins[idx])


def gen_pretrain_dataset(spec: WorldSpec, rng) -> PretrainData:
    spec.validate()
    rng = np.random.default_rng(rng)
    objects = spec.objects()
    centers = np.array([o.center for o in objects])
    contexts, rows, bins = [], [], []

    for _ in range(spec.n_composition):
        a, b = rng.choice(spec.num_objects, size=2, replace=False)
        rel = int(rng.integers(NUM_RELATIONS))
        contexts.append(Context("composition", (int(a), int(b), rel)))
        shown = b
        if spec.caption_noise > 0 and spec.num_objects > 2 and rng.random() < spec.caption_noise:
            shown = rng.choice([o for o in range(spec.num_objects) if o not in (a, b)])
        rows.append(np.concatenate([centers[a], centers[shown]]) + spec.jitter * rng.standard_normal(4))
        bins.append(-1)

    n_bins = spec.attribute.num_bins
    attr_centers = np.asarray(spec.attribute.centers)
    for _ in range(spec.n_portrait):
        style = int(rng.integers(spec.num_styles))
        if rng.random() < spec.bias_ratio:
            a = 0
        else:
            a = 1 + int(rng.integers(n_bins - 1))
        layout = spec.style_layout(style)
        x = np.array([attr_centers[a], layout[0], layout[1], layout[2]]) + spec.jitter * rng.standard_normal(4)
        contexts.append(Context("portrait", (style,)))
        rows.append(x)
        bins.append(a)

    for _ in range(spec.n_preference):
        p = int(rng.integers(spec.num_pref_prompts))
        contexts.append(Context("preference", (p,)))
        rows.append(spec.pref_mean(p) + spec.pref_jitter * rng.standard_normal(4))
        bins.append(-1)

    x0 = np.clip(np.array(rows), -DATA_BOX, DATA_BOX)
    return PretrainData(contexts, x0, np.array(bins, dtype=np.int64))


def detect(obj: ObjectClass, x0) -> float:
    """Confidence that ``obj`` appears: best Gaussian kernel match over slots."""
    slots = np.asarray(x0, dtype=np.float64).reshape(-1, 2)
    d2 = np.sum((slots - np.asarray(obj.center)) ** 2, axis=1)
    return float(np.max(np.exp(-d2 / (2.0 * obj.width**2))))


def detect_batch(obj_centers: np.ndarray, widths: np.ndarray, x0: np.ndarray) -> np.ndarray:
    """Vectorised detect: ``obj_centers`` (n, 2) and ``widths`` (n,) pair with rows of ``x0`` (n, 2m)."""
    slots = x0.reshape(x0.shape[0], -1, 2)
    d2 = np.sum((slots - obj_centers[:, None, :]) ** 2, axis=2)
    return np.max(np.exp(-d2 / (2.0 * widths[:, None] ** 2)), axis=1)


def classify_attribute(x0, attr: AttributeSpec):
    """Nearest bin center to the attribute coordinate (slot 0, first coordinate); ties go to the lower bin."""
    x0 = np.asarray(x0, dtype=np.float64)
    coord = x0[..., 0]
    dist = np.abs(coord[..., None] - np.asarray(attr.centers))
    out = np.argmin(dist, axis=-1)
    return int(out) if out.ndim == 0 else out


def split_objects(classes: Sequence[ObjectClass], train_fraction: float, rng) -> tuple[list[int], list[int]]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(classes)
    if n < 2:
        raise ValueError("need at least 2 classes to split")
    n_seen = int(round(n * train_fraction))
    if not 1 <= n_seen < n:
        raise ValueError(f"split of {n} classes at {train_fraction} leaves an empty side")
    perm = np.random.default_rng(rng).permutation([c.id for c in classes])
    return sorted(int(i) for i in perm[:n_seen]), sorted(int(i) for i in perm[n_seen:])


@dataclass(frozen=True)
class TaskSpec:
    """Prompt distribution for one task: ``pool`` holds object ids (composition) or prompt/style ids."""

    kind: str
    pool: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        need = 2 if self.kind == "composition" else 1
        if len(self.pool) < need:
            raise ValueError(f"{self.kind} task needs at least {need} ids in its pool")


def make_prompt(task: TaskSpec, rng: np.random.Generator) -> Context:
    pool = task.pool
    if task.kind == "composition":
        a = pool[int(rng.integers(len(pool)))]
        b = a
        while b == a:
            b = pool[int(rng.integers(len(pool)))]
        return Context("composition", (a, b, int(rng.integers(NUM_RELATIONS))))
    return Context(task.kind, (pool[int(rng.integers(len(pool)))],))


# dataset files ----------------------------------------------------------

DATASET_MAGIC = b"DFTD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def write_dataset(path, data: PretrainData, spec: WorldSpec) -> None:
    """Binary container plus a ``.json`` sidecar holding the generating spec."""
    path = Path(path)
    n, d = data.x0.shape
    ctx = np.array(
        [[TASK_KINDS.index(c.kind), *c.ids, *([-1] * (3 - len(c.ids))), b] for c, b in zip(data.contexts, data.attribute_bins)],
        dtype=np.float64,
    ).reshape(n, 5)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, d, 5))
        f.write(data.x0.astype("<f8").tobytes())
        f.write(ctx.astype("<f8").tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"format": "DFTD", "version": DATASET_VERSION, "spec": spec.to_dict()}, indent=2, sort_keys=True))


def read_dataset(path) -> tuple[PretrainData, WorldSpec]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header at byte {len(raw)}")
    magic, version, n, d, nc = _HEADER.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r} at byte 0")
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported version {version} at byte 4")
    need = _HEADER.size + 8 * n * (d + nc)
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, file ends at byte {len(raw)}")
    x0 = np.frombuffer(raw, "<f8", n * d, _HEADER.size).reshape(n, d).astype(np.float64)
    ctx = np.frombuffer(raw, "<f8", n * nc, _HEADER.size + 8 * n * d).reshape(n, nc)
    contexts = []
    for row in ctx.astype(np.int64):
        kind = TASK_KINDS[row[0]]
        ids = tuple(int(i) for i in row[1:4] if i >= 0)
        contexts.append(Context(kind, ids))
    spec = WorldSpec.from_dict(json.loads(path.with_suffix(path.suffix + ".json").read_text())["spec"])
    return PretrainData(contexts, x0, ctx[:, 4].astype(np.int64)), spec
