import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffrl.tasks import (
    NUM_RELATIONS,
    AttributeSpec,
    Context,
    ObjectClass,
    TaskSpec,
    WorldSpec,
    classify_attribute,
    detect,
    gen_pretrain_dataset,
    make_prompt,
    read_dataset,
    split_objects,
    write_dataset,
)


def test_composition_slots_follow_caption_when_noise_off():
    spec = WorldSpec(caption_noise=0.0, n_composition=2000, n_portrait=0, n_preference=0)
    data = gen_pretrain_dataset(spec, 0)
    objs = spec.objects()
    ok = 0
    for ctx, x in zip(data.contexts, data.x0):
        a, b = ctx.objects
        ok += (np.linalg.norm(x[:2] - objs[a].center) < 3 * spec.jitter * math.sqrt(2)
               and np.linalg.norm(x[2:] - objs[b].center) < 3 * spec.jitter * math.sqrt(2))
    assert ok / len(data) > 0.99


def test_caption_noise_swaps_second_slot_at_rate():
    spec = WorldSpec(caption_noise=0.3, n_composition=4000, n_portrait=0, n_preference=0)
    data = gen_pretrain_dataset(spec, 1)
    objs = spec.objects()
    miss = np.mean([np.linalg.norm(x[2:] - objs[c.objects[1]].center) > 0.5 for c, x in zip(data.contexts, data.x0)])
    assert abs(miss - 0.3) < 0.03


def test_bias_ratio():
    spec = WorldSpec(n_composition=0, n_portrait=10_000, n_preference=0)
    data = gen_pretrain_dataset(spec, 2)
    frac = np.mean(data.attribute_bins == 0)
    assert abs(frac - 0.85) < 0.02
    # the classifier recovers the generating bin almost always (jitter 0.1 vs half-spacing 0.5)
    assert np.mean(classify_attribute(data.x0, spec.attribute) == data.attribute_bins) > 0.999


def test_dataset_deterministic_and_boxed(world):
    a, b = gen_pretrain_dataset(world, 5), gen_pretrain_dataset(world, 5)
    assert np.array_equal(a.x0, b.x0) and a.contexts == b.contexts
    assert np.all(np.abs(a.x0) <= 2.0)


@pytest.mark.parametrize("bad", [dict(bias_ratio=1.0), dict(bias_ratio=0.0), dict(num_objects=1)])
def test_dataset_rejects_bad_spec(bad):
    with pytest.raises(ValueError):
        gen_pretrain_dataset(WorldSpec(**bad), 0)


def test_detect_values():
    o = ObjectClass(0, (0.5, -0.5), 0.1)
    assert detect(o, [0.5, -0.5, 9.0, 9.0]) == 1.0
    assert detect(o, [5.0, 5.0, -5.0, 5.0]) < 1e-6
    assert detect(o, [0.6, -0.5, 9.0, 9.0]) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert abs(detect(o, [0.6, -0.5, 9.0, 9.0]) - 0.606531) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.floats(0.0, 1.0))
def test_detect_symmetric_and_monotone(x, shrink):
    o = ObjectClass(0, (0.3, 0.2), 0.4)
    x = np.array(x)
    assert detect(o, x) == detect(o, np.concatenate([x[2:], x[:2]]))
    closer = x.copy()
    closer[:2] = o.center + shrink * (x[:2] - o.center)
    assert detect(o, closer) >= detect(o, x)


def test_classify_examples():
    attr = AttributeSpec()
    assert classify_attribute([0.5, 0, 0, 0], attr) == 2
    assert classify_attribute([0.0, 0, 0, 0], attr) == 1
    assert classify_attribute([0.9, 0, 0, 0], attr) == 2
    with pytest.raises(ValueError):
        AttributeSpec((0.0, 0.0))


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-0.49, 0.49))
def test_classify_constant_on_cells(coord, nudge):
    attr = AttributeSpec()
    b = classify_attribute([coord, 0, 0, 0], attr)
    center = attr.centers[b]
    # any point between the coordinate and its bin center stays in the same cell
    mid = center + (coord - center) * (0.5 + nudge)
    assert classify_attribute([mid, 0, 0, 0], attr) == b


def test_split_objects(world):
    seen, unseen = split_objects(world.objects(), 0.8, 0)
    assert len(seen) == 8 and len(unseen) == 2
    assert set(seen).isdisjoint(unseen) and set(seen) | set(unseen) == set(range(10))
    assert split_objects(world.objects(), 0.8, 0) == (seen, unseen)
    with pytest.raises(ValueError):
        split_objects(world.objects(), 1.0, 0)
    with pytest.raises(ValueError):
        split_objects(world.objects()[:1], 0.5, 0)


def test_prompts(world):
    from scipy.stats import chisquare

    rng = np.random.default_rng(0)
    task = TaskSpec("composition", tuple(range(10)))
    prompts = [make_prompt(task, rng) for _ in range(10_000)]
    assert all(p.ids[0] != p.ids[1] for p in prompts)
    counts = np.bincount([p.ids[2] for p in prompts], minlength=NUM_RELATIONS)
    assert chisquare(counts).pvalue > 0.001
    assert world.local_embedding(prompts[0]).size == 2 * 10 + 5
    with pytest.raises(ValueError):
        Context("composition", (1, 1, 0))


def test_portrait_embedding_has_no_attribute(world):
    e = world.embed(Context("portrait", (3,)))
    assert e.sum() == 1.0


def test_dataset_roundtrip(tmp_path, world):
    data = gen_pretrain_dataset(world, 3)
    path = tmp_path / "d.dftd"
    write_dataset(path, data, world)
    back, spec = read_dataset(path)
    assert np.array_equal(back.x0, data.x0) and back.contexts == data.contexts
    assert np.array_equal(back.attribute_bins, data.attribute_bins)
    assert spec == world
    raw = path.read_bytes()
    path.write_bytes(raw[:-9])
    with pytest.raises(ValueError, match="byte"):
        read_dataset(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="byte 0"):
        read_dataset(path)


def test_world_dict_roundtrip():
    w = replace(WorldSpec(), bias_ratio=0.7)
    assert WorldSpec.from_dict(w.to_dict()) == w
