import json
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

from trlhpo.evaluator import Evaluator, SurrogateEvaluator, surrogate_eval
from trlhpo.search import RunConfig, read_log, random_policy_returns, run_search

ROOT = Path(__file__).resolve().parents[1]


def small(tmp_path, **kw):
    base = dict(evaluator="surrogate", episodes=4, exploration_episodes=3, models_per_episode=3,
                opt_rounds_per_episode=2, rl_batch_size=8, buffer_capacity=32, update_after=8,
                actor_lr=3e-4, critic_lr=1e-3, out_dir=str(tmp_path / "run"), seed=3)
    base.update(kw)
    return RunConfig(**base)


def steps(records):
    return [r for r in records if r["type"] == "step"]


def test_config_round_trip_and_validation(tmp_path):
    cfg = small(tmp_path)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert RunConfig.load(path) == cfg
    with pytest.raises(ValueError):
        RunConfig.from_dict({"episodes": 3, "bogus": 1})
    with pytest.raises(ValueError):
        RunConfig(evaluator="gpu")
    assert RunConfig(episodes=50).n_explore == 40
    assert RunConfig().warmup == 2000 and RunConfig().models_per_episode == 10
    assert RunConfig().opt_rounds_per_episode == 5


def test_shipped_configs_load():
    for name in ("full.json", "desk.json", "surrogate.json"):
        RunConfig.load(ROOT / "configs" / name)


def test_log_is_well_formed(tmp_path):
    cfg = small(tmp_path)
    res = run_search(cfg)
    recs = read_log(res.log_path)
    assert recs[0]["type"] == "header" and recs[0]["config"] == cfg.to_dict()
    assert recs[-1]["type"] == "summary" and recs[-1]["episodes_completed"] == 4
    assert [r["episode"] for r in recs if r["type"] == "episode"] == [0, 1, 2, 3]
    by_rollout = defaultdict(list)
    for r in steps(recs):
        by_rollout[(r["episode"], r["rollout"])].append(r)
        assert 0 <= min(r["action"]) and max(r["action"]) <= 1
        assert len(r["batch_accuracies"]) == 32
    for rs in by_rollout.values():
        ts = [r["t"] for r in rs]
        assert ts == sorted(ts)
        assert rs[-1]["done"] and not any(r["done"] for r in rs[:-1])
        assert [r["step"] for r in rs] == list(range(len(rs)))
        assert "final_attention" in rs[-1]
    assert (Path(cfg.out_dir) / "agent.json").exists()


def test_buffer_matches_buffered_records(tmp_path):
    cfg = small(tmp_path, buffer_capacity=10_000, update_after=10_000)
    res = run_search(cfg)
    recs = steps(read_log(res.log_path))
    assert res.buffer_size == sum(r["buffered"] for r in recs)
    # offline exploitation: the final episode writes nothing to the buffer
    assert not any(r["buffered"] for r in recs if r["phase"] == "exploit")
    assert all(r["buffered"] for r in recs if r["phase"] == "explore")


def test_exploitation_is_noise_free(tmp_path):
    res = run_search(small(tmp_path))
    for r in steps(read_log(res.log_path)):
        if r["phase"] == "exploit":
            assert r["action"] == r["clean_action"]


def test_updates_start_after_warmup(tmp_path):
    res = run_search(small(tmp_path, update_after=10_000))
    assert not [r for r in read_log(res.log_path) if r["type"] == "update"]
    res = run_search(small(tmp_path, out_dir=str(tmp_path / "b")))
    ups = [r for r in read_log(res.log_path) if r["type"] == "update"]
    assert ups and all(np.isfinite(u["critic_loss"]) for u in ups)


def test_determinism_byte_identical(tmp_path):
    a = run_search(small(tmp_path, out_dir=str(tmp_path / "a")))
    b = run_search(small(tmp_path, out_dir=str(tmp_path / "b")))
    assert json.dumps(a.reward_sequence()) == json.dumps(b.reward_sequence())


def test_workers_do_not_change_results(tmp_path):
    a = run_search(small(tmp_path, out_dir=str(tmp_path / "a")))
    b = run_search(small(tmp_path, out_dir=str(tmp_path / "b"), workers=3))
    assert a.reward_sequence() == b.reward_sequence()


def test_cache_is_transparent(tmp_path):
    on = run_search(small(tmp_path, out_dir=str(tmp_path / "on"), use_cache=True))
    off = run_search(small(tmp_path, out_dir=str(tmp_path / "off"), use_cache=False))
    assert on.reward_sequence() == off.reward_sequence()
    assert on.evaluations < off.evaluations


def test_wallclock_budget_stops_early(tmp_path):
    cfg = small(tmp_path, episodes=1000, wallclock_budget_s=1.0)
    res = run_search(cfg)
    recs = read_log(res.log_path)
    assert res.stopped == "wallclock" and res.episodes_completed < 1000
    assert recs[-1]["type"] == "summary" and recs[-1]["stopped"] == "wallclock"
    assert all(isinstance(r, dict) for r in recs)


def test_tiny_budget_completes_at_most_one_episode(tmp_path):
    res = run_search(small(tmp_path, episodes=50, wallclock_budget_s=1e-9))
    assert res.episodes_completed <= 1


class FlakyEvaluator(Evaluator):
    fingerprint = "flaky"

    def evaluate(self, arch):
        if len(arch) == 2 and arch.layers[0].kind == "Conv2D":
            raise RuntimeError("simulated failure")
        return surrogate_eval(arch, 0)


def test_evaluator_failures_become_incidents(tmp_path):
    res = run_search(small(tmp_path, use_cache=False), evaluator=FlakyEvaluator())
    recs = read_log(res.log_path)
    incidents = [r for r in recs if r["type"] == "incident"]
    assert incidents and all("simulated failure" in r["error"] for r in incidents)
    assert res.episodes_completed == 4


def test_resume_continues_identically(tmp_path):
    full = run_search(small(tmp_path, out_dir=str(tmp_path / "full")))
    cfg = small(tmp_path, out_dir=str(tmp_path / "part"))
    run_search(cfg.replace(episodes=2))
    path = Path(cfg.out_dir) / "run.jsonl"
    # simulate a crash mid-episode: drop the summary, keep a torn line
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-3]) + '\n{"type": "st')
    resumed = run_search(cfg, resume=True)
    recs = read_log(resumed.log_path)
    assert [r["episode"] for r in recs if r["type"] == "episode"] == [0, 1, 2, 3]
    full_rewards = [r["reward"] for r in steps(read_log(full.log_path))]
    assert [r["reward"] for r in steps(recs)] == full_rewards


def test_random_policy_baseline_runs():
    rets = random_policy_returns(RunConfig(evaluator="surrogate", seed=1), n_episodes=20)
    assert len(rets) == 20 and all(-1 <= r <= 1 for r in rets)


def test_learning_beats_random_seed7(tmp_path):
    cfg = RunConfig.load(ROOT / "configs" / "surrogate.json").replace(seed=7, out_dir=str(tmp_path / "r"))
    res = run_search(cfg)
    exploit = np.mean(res.returns_for("exploit"))
    random_mean = np.mean(random_policy_returns(cfg, 100, SurrogateEvaluator(7)))
    assert exploit > random_mean
