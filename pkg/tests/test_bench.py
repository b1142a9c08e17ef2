import math

import numpy as np
import pytest

from diffrl.checkpoint import Checkpoint, CheckpointError, ConfigMismatchError, load_checkpoint, save_checkpoint
from diffrl.cli import main
from diffrl.config import DEFAULTS, ConfigError, RunConfig
from diffrl.evaluation import (
    METRIC_ORDER,
    evaluate_detection,
    evaluate_parity,
    evaluate_relative,
    model_generator,
    read_eval,
    render_table,
)
from diffrl.metrics import CSV_HEADER, MetricsRow, append_metrics, read_metrics
from diffrl.model import DenoiserParams
from diffrl.rl import TrainerState
from diffrl.tasks import Context, WorldSpec

# config ------------------------------------------------------------------------


def test_config_defaults_and_roundtrip():
    cfg = RunConfig()
    assert cfg["rl.clip_epsilon"] == 1e-4 and cfg["sampler.num_inference_steps"] == 50
    again = RunConfig.from_toml(cfg.to_toml())
    assert again.values == cfg.values and again.hash() == cfg.hash()


def test_config_tables_and_dotted_keys_agree():
    a = RunConfig.from_toml("[rl]\nclip_epsilon = 0.2\nlr = 1\n")
    b = RunConfig.from_toml('"rl.clip_epsilon" = 0.2\n"rl.lr" = 1.0\n')
    assert a.values == b.values and a["rl.lr"] == 1.0


@pytest.mark.parametrize("text,key", [
    ("rl.clip_epsilonn = 1.0", "rl.clip_epsilonn"),
    ('[rl]\nnorm_mode = "median"', "rl.norm_mode"),
    ("[rl]\nmax_iterations = 1.5", "rl.max_iterations"),
    ('[finetune]\ntasks = ["art"]', "finetune.tasks"),
    ("[sampler]\nnum_inference_steps = 100", "num_inference_steps"),
])
def test_config_errors_name_key(text, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        RunConfig.from_toml(text)


def test_config_hash_ignores_budget_only():
    cfg = RunConfig()
    longer = RunConfig({"rl.max_iterations": 999, "out_dir": "elsewhere"})
    other = RunConfig({"rl.lr": 5e-4})
    assert cfg.hash() == longer.hash() != other.hash()


def test_every_key_has_default_builders_run():
    cfg = RunConfig()
    assert set(cfg.values) == set(DEFAULTS)
    sp = cfg.splits()
    assert set(sp.seen_objects).isdisjoint(sp.unseen_objects)
    assert set(sp.train_styles).isdisjoint(sp.heldout_styles)
    assert set(sp.train_pref).isdisjoint(sp.heldout_pref)
    assert [b.name for b in cfg.task_bindings(["composition", "fairness"])] == ["composition", "fairness"]


# checkpoints --------------------------------------------------------------------


def _ckpt():
    p = DenoiserParams.init(4, 6, (5,), np.random.default_rng(0))
    state = TrainerState.fresh(p, 3)
    state.rngs["rollout"].standard_normal(7)
    state.running_stats.update("preference:1", 0.5)
    state.iteration = 4
    return Checkpoint.from_state(state, "abc123", "rl", WorldSpec().to_dict())


def test_checkpoint_roundtrip_bytes(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, _ckpt())
    loaded = load_checkpoint(a)
    save_checkpoint(b, loaded)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:4] == b"DFTN"
    st = loaded.to_state()
    assert np.array_equal(st.params.flat(), _ckpt().params.flat())
    assert st.rngs["rollout"].standard_normal() == _ckpt().to_state().rngs["rollout"].standard_normal()
    assert st.running_stats.stats("preference:1") == (1, 0.5, 0.0)


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, _ckpt())
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match=f"byte {len(raw) - 5}"):
        load_checkpoint(path)
    path.write_bytes(raw[:10])
    with pytest.raises(CheckpointError, match="byte 10"):
        load_checkpoint(path)
    path.write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError, match="version 2 at byte 4"):
        load_checkpoint(path)
    path.write_bytes(raw)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expected_hash="zzz")
    assert load_checkpoint(path, expected_hash="zzz", force=True).iteration == 4


# metrics --------------------------------------------------------------------------


def test_metrics_csv(tmp_path):
    path = tmp_path / "m.csv"
    rows = [MetricsRow(0, "preference", 0.1, 0.01, 1.2), MetricsRow(0, "fairness", -0.5, statistical_parity=0.5)]
    append_metrics(path, rows)
    append_metrics(path, MetricsRow(1, "preference", 0.2))
    text = path.read_text()
    assert text.splitlines()[0] == CSV_HEADER
    assert CSV_HEADER == ("iteration,task,mean_reward,loss_ppo,loss_pretrain,statistical_parity,"
                          "detection_seen,detection_unseen,wall_seconds")
    assert read_metrics(path) == rows + [MetricsRow(1, "preference", 0.2)]
    path.write_text("bad,header\n")
    with pytest.raises(ValueError, match="byte 0"):
        append_metrics(path, rows)


# evaluation --------------------------------------------------------------------------

W = WorldSpec()


def uniform_attr_generator(contexts, seeds):
    n = len(contexts)
    x = np.zeros((n, 4))
    x[:, 0] = np.array(W.attribute.centers)[np.arange(n) % 4]
    return x


def one_attr_generator(contexts, seeds):
    x = np.zeros((len(contexts), 4))
    x[:, 0] = W.attribute.centers[0]
    return x


def noisy_generator(contexts, seeds):
    return np.stack([np.random.default_rng(int(s)).uniform(-2, 2, 4) for s in seeds])


def test_parity_oracles():
    assert evaluate_parity(uniform_attr_generator, W, [20, 21], 64, 16, 0) == 0.0
    assert abs(evaluate_parity(one_attr_generator, W, [20, 21], 64, 16, 0) - math.sqrt(0.75)) < 1e-12
    a = evaluate_parity(noisy_generator, W, [20, 21], 64, 16, 5)
    assert a == evaluate_parity(noisy_generator, W, [20, 21], 64, 16, 5)
    assert a < 0.25


def test_detection_oracles():
    objs = W.objects()

    def exact(contexts, seeds):
        return np.array([np.concatenate([objs[c.ids[0]].center, objs[c.ids[1]].center]) for c in contexts])

    def far(contexts, seeds):
        return np.full((len(contexts), 4), 50.0)

    assert evaluate_detection(exact, W, [0, 2, 3], [1, 8], 8, 4, 0) == (1.0, 1.0)
    s, u = evaluate_detection(far, W, [0, 2, 3], [1, 8], 8, 4, 0)
    assert s < 1e-3 and u < 1e-3
    seen_prompts = []

    def spy(contexts, seeds):
        seen_prompts.extend(contexts)
        return noisy_generator(contexts, seeds)

    r1 = evaluate_detection(spy, W, [0, 2, 3], [1, 8], 8, 4, 3)
    assert all(set(c.ids[:2]) == {1, 8} for c in seen_prompts[32:])
    assert r1 == evaluate_detection(noisy_generator, W, [0, 2, 3], [1, 8], 8, 4, 3)


def test_relative_scores():
    base = {"preference_reward": 0.1, "statistical_parity": 0.567}
    spec = {"preference_reward": 0.5, "statistical_parity": 0.479}
    rel = evaluate_relative(spec, spec, base)
    assert rel == {"preference_reward": 1.0, "statistical_parity": 1.0}
    assert evaluate_relative(base, spec, base) == {"preference_reward": 0.0, "statistical_parity": 0.0}
    joint = {"preference_reward": 0.3, "statistical_parity": 0.499}
    rel = evaluate_relative(joint, spec, base)
    assert rel["statistical_parity"] == pytest.approx(0.068 / 0.088, abs=1e-12)
    assert abs(rel["statistical_parity"] - 0.773) < 1e-3
    assert evaluate_relative(joint, base, base)["preference_reward"] is None
    with pytest.raises(ValueError):
        evaluate_relative(joint, {"preference_reward": 0.5}, base)


def test_table_keeps_input_order():
    recs = [{"label": n, "metrics": {"statistical_parity": 0.1, "preference_reward": 0.2}} for n in ("z", "a", "m")]
    lines = render_table(recs).splitlines()
    assert [l.split()[0] for l in lines[2:]] == ["z", "a", "m"]
    assert lines[0].split()[1:] == ["preference_reward", "statistical_parity"]


# cli --------------------------------------------------------------------------------

SMALL_TOML = """
[world]
n_composition = 300
n_portrait = 300
n_preference = 300
[pretrain]
steps = 30
batch_size = 32
[sampler]
num_inference_steps = 8
[rl]
max_iterations = 2
prompts_per_iteration = 2
samples_per_prompt = 4
pretrain_batch_size = 16
[finetune]
tasks = ["preference", "fairness"]
checkpoint_every = 1
[tasks]
fairness_prompts = 2
fairness_minibatch = 4
[baseline]
max_iterations = 2
prompts_per_iteration = 2
samples_per_prompt = 4
k = 4
[eval]
n_prompts = 2
samples_per_prompt = 8
n_heldout_pretrain = 60
"""


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "c.toml"
    cfg.write_text(SMALL_TOML)
    out = root / "run"
    for cmd in (["gen-data"], ["pretrain"], ["finetune"]):
        assert main([*cmd, "--config", str(cfg), "--out", str(out)]) == 0
    return root, cfg, out


def test_cli_pipeline(cli_run, capsys):
    root, cfg, out = cli_run
    assert (out / "config.resolved.toml").exists()
    assert RunConfig.load(out / "config.resolved.toml").hash() == RunConfig.load(cfg).hash()
    rows = read_metrics(out / "metrics.csv")
    assert [(r.iteration, r.task) for r in rows] == [(0, "preference"), (0, "fairness"), (1, "preference"), (1, "fairness")]
    for ck, label in (("base.ckpt", "base"), ("final.ckpt", "rl")):
        assert main(["evaluate", "--config", str(cfg), "--out", str(out), "--checkpoint", str(out / ck), "--label", label]) == 0
    base = read_eval(out / "eval_base.json")
    assert list(base["metrics"]) == list(METRIC_ORDER)
    assert all(np.isfinite(v) for v in base["metrics"].values())
    capsys.readouterr()
    assert main(["compare", str(out / "eval_rl.json"), str(out / "eval_base.json")]) == 0
    table = capsys.readouterr().out.splitlines()
    assert [l.split()[0] for l in table[2:]] == ["rl", "base"]
    assert main(["plot", "--metrics", str(out / "metrics.csv"), "--out", str(out)]) == 0
    assert (out / "reward_curves.svg").read_text().lstrip().startswith("<?xml")


def test_cli_reproducible_and_resumable(cli_run):
    root, cfg, out = cli_run
    out2 = root / "run2"
    for cmd in (["gen-data"], ["pretrain"], ["finetune"]):
        assert main([*cmd, "--config", str(cfg), "--out", str(out2)]) == 0
    assert (out / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
    assert (out / "final.ckpt").read_bytes() == (out2 / "final.ckpt").read_bytes()
    assert main(["finetune", "--config", str(cfg), "--out", str(out2), "--resume", str(out2 / "ckpt_00001.ckpt")]) == 0
    assert (out / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
    assert main(["finetune", "--config", str(cfg), "--out", str(out2), "--seed", "9",
                 "--resume", str(out2 / "ckpt_00001.ckpt")]) == 2


def test_cli_baseline(cli_run):
    root, cfg, out = cli_run
    bl = root / "bl.toml"
    bl.write_text(SMALL_TOML.replace('tasks = ["preference", "fairness"]', 'tasks = ["preference"]\nmethod = "raft"'))
    assert main(["finetune", "--config", str(bl), "--out", str(out), "--init", str(out / "base.ckpt")]) == 0
    assert [r.task for r in read_metrics(out / "metrics.csv")] == ["preference", "preference"]


def test_cli_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["launch"])
    assert e.value.code != 0
    with pytest.raises(SystemExit) as e:
        main(["pretrain", "--bogus"])
    assert e.value.code != 0
    bad = tmp_path / "bad.toml"
    bad.write_text("[rl]\nclip = 1\n")
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "rl.clip" in capsys.readouterr().err


def test_untrained_checkpoint_evaluates(tmp_path):
    cfg = RunConfig({"eval.n_prompts": 2, "eval.samples_per_prompt": 4, "eval.n_heldout_pretrain": 30,
                     "sampler.num_inference_steps": 5})
    from diffrl.cli import heldout_corpus
    from diffrl.evaluation import evaluate_all

    world = cfg.world()
    p = DenoiserParams.init(world.sample_dim, world.context_dim, (8,), np.random.default_rng(0))
    m = evaluate_all(p, world, cfg.sampler(), cfg.schedule(), cfg.splits(), heldout_corpus(cfg), 2, 4, 0)
    assert list(m) == list(METRIC_ORDER) and all(np.isfinite(v) for v in m.values())
    gen = model_generator(p, world, cfg.sampler(), cfg.schedule())
    assert gen([Context("preference", (0,))], np.array([1])).shape == (1, 4)
