"""One test per acceptance criterion; each prints a PASS/FAIL line at its stated tolerance."""

import itertools
import json
import time
from pathlib import Path

import numpy as np

from gradcases import CASES, RTOL, check_case, check_network, rel_err
from trlhpo import tensor as T
from trlhpo.data import load_dataset
from trlhpo.env import (
    LOW_ACCURACY_REASON, MAX_LAYERS_REASON, MIN_IMPROVEMENT_REASON, EnvState, Environment, ImrEncoder, check_stop,
)
from trlhpo.evaluator import BEST_HP, EvalOutcome, SurrogateEvaluator, TrainBudget, surrogate_accuracy, train_candidate
from trlhpo.reports import report_attention_diff, report_layer_affinity
from trlhpo.search import RunConfig, read_log, random_policy_returns, run_rollout, run_search
from trlhpo.space import (
    CONV, FCL, GRID, HP_NAMES, KINDS, MAX_LAYERS, POOL, ArchSpec, IllegalLayerError, LayerSpec, conv, decode_action,
    fcl, legalize, maxpool, propagate_shape,
)
from trlhpo.tensor import GradTape, Tensor, finite_diff_grad
from trlhpo.transformer import TransformerNet, actor_forward, critic_forward, stack_states

ROOT = Path(__file__).resolve().parents[1]
SURROGATE_CONFIG = ROOT / "configs" / "surrogate.json"
N_CASES = 100


def random_state(rng, count=None):
    count = int(rng.integers(0, MAX_LAYERS + 1)) if count is None else count
    slots = np.zeros((MAX_LAYERS, 64))
    slots[:count] = np.tanh(rng.normal(size=(count, 64)))
    return EnvState(slots, count, 0.1)


# 1 -----------------------------------------------------------------------------


def _network_case(seed):
    """Actor and critic parameter, input and action gradients on one random batch."""
    rng = np.random.default_rng([seed, 77])
    actor = TransformerNet("actor", rng)
    critic = TransformerNet("critic", rng)
    b = int(rng.integers(1, 5))
    slots, counts = stack_states([random_state(rng) for _ in range(b)])
    acts = rng.uniform(size=(b, 4))
    w = rng.normal(size=(b, 4))
    worst = max(
        check_network(actor, lambda: T.sum(actor(slots, counts)[0] * w), seed, n_param_coords=3),
        check_network(critic, lambda: T.sum(critic(slots, counts, acts)[0]), seed, n_param_coords=3),
    )
    coords = rng.choice(slots.size, size=3, replace=False)
    x = Tensor(slots, requires_grad=True)
    a = Tensor(acts, requires_grad=True)
    with GradTape() as tape:
        loss = T.sum(critic(x, counts, a)[0])
    gx, ga = tape.gradient(loss, [x, a])
    num_x = finite_diff_grad(lambda s: T.sum(critic(s, counts, acts)[0]), slots, coords=coords).reshape(-1)[coords]
    num_a = finite_diff_grad(lambda u: T.sum(critic(slots, counts, u)[0]), acts)
    worst = max(worst, float(np.max(rel_err(gx.reshape(-1)[coords], num_x))), float(np.max(rel_err(ga, num_a))))
    return worst


def test_criterion_1_gradient_fidelity(criterion):
    start = time.perf_counter()
    worst = {name: max(check_case(name, seed) for seed in range(N_CASES)) for name in CASES}
    worst["actor+critic"] = max(_network_case(seed) for seed in range(N_CASES))
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if v >= RTOL}
    criterion(1, "analytic vs finite-difference gradients",
              not bad and elapsed < 120,
              f"{len(worst)} targets x {N_CASES} cases, max rel err {max(worst.values()):.1e}, "
              f"{elapsed:.0f}s" + (f", failing {sorted(bad)}" if bad else ""))


# 2 -----------------------------------------------------------------------------


def test_criterion_2_transformer_invariants(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    actor = TransformerNet("actor", rng)
    critic = TransformerNet("critic", rng)
    problems = []
    for i in range(50):
        s = random_state(rng)
        action, _ = actor_forward(actor, s)
        if not np.all((action >= 0) & (action <= 1)):
            problems.append(f"actor range {i}")
        if not -1 <= critic_forward(critic, s, rng.uniform(size=4)) <= 1:
            problems.append(f"critic range {i}")
        slots, counts = stack_states([s])
        for net, extra in ((actor, ()), (critic, (rng.uniform(size=(1, 4)),))):
            for attn in net(slots, counts, *extra)[1]:
                if np.max(np.abs(attn.data.sum(-1) - 1.0)) > 1e-9:
                    problems.append(f"attention rows {i}")
        # prefix determinism: rewriting slots after the read position leaves the action unchanged
        k = min(s.layer_count, MAX_LAYERS - 1)
        noisy = np.array(s.slots)
        noisy[k + 1 :] = rng.normal(size=noisy[k + 1 :].shape)
        if not np.array_equal(action, actor_forward(actor, EnvState(noisy, s.layer_count, 0.1))[0]):
            problems.append(f"prefix {i}")
    elapsed = time.perf_counter() - start
    criterion(2, "actor/critic ranges, attention rows, causal prefix determinism",
              not problems and elapsed < 60, f"50 states, {elapsed:.1f}s" + (f", {problems[:3]}" if problems else ""))


# 3 -----------------------------------------------------------------------------


def _windows(size, k, s, p=0):
    return sum(1 for start in range(0, size + 2 * p) if start % s == 0 and start + k <= size + 2 * p)


def test_criterion_3_search_space_oracles(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    problems = []
    for _ in range(10_000):
        shape = (int(rng.integers(1, 600)),) if rng.random() < 0.1 else (
            int(rng.integers(1, 9)), int(rng.integers(1, 29)), int(rng.integers(1, 29)))
        layer = decode_action(rng.uniform(size=4), shape)
        if not layer.in_grid():
            problems.append(f"not in grid: {layer}")
        try:
            propagate_shape(shape, layer)
        except IllegalLayerError:
            problems.append(f"illegal after legalize: {layer} on {shape}")
    checked = 0
    while checked < 1000:
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 29)), int(rng.integers(1, 29)))
        kind = KINDS[rng.integers(3)]
        if kind == FCL:
            continue
        raw = LayerSpec.make(kind, **{n: GRID[kind][n][rng.integers(len(GRID[kind][n]))] for n in HP_NAMES[kind]})
        layer = legalize(raw, shape)
        if layer.kind == FCL:
            continue
        k, s = layer["kernel"], layer["stride"]
        p = layer["padding"] if kind != CONV else 0
        want = ((layer["filters"] if kind == CONV else shape[0]), _windows(shape[1], k, s, p), _windows(shape[2], k, s, p))
        if propagate_shape(shape, layer) != want:
            problems.append(f"shape {layer} on {shape}")
        checked += 1
    kind_a0 = {CONV: 1 / 6, FCL: 1 / 2, POOL: 5 / 6}
    for kind in KINDS:
        shape = (100,) if kind == FCL else (1, 28, 28)
        for pos, name in enumerate(HP_NAMES[kind]):
            values = GRID[kind][name]
            hit = set()
            for i in range(len(values)):
                # midpoint of each value's cell; other components at their top cell so the
                # pool kernel is large enough to admit every padding value
                action = [kind_a0[kind], 0.99, 0.99, 0.99]
                action[1 + pos] = (i + 0.5) / len(values)
                hit.add(decode_action(action, shape)[name])
            if hit != set(values):
                problems.append(f"surjectivity {kind}.{name}")
    elapsed = time.perf_counter() - start
    criterion(3, "decode/legalize membership, window oracle, surjectivity",
              not problems and elapsed < 60, f"10000 actions, {checked} shapes, {elapsed:.1f}s"
              + (f", {problems[:3]}" if problems else ""))


# 4 -----------------------------------------------------------------------------


def const_env(accs):
    it = iter(accs)
    return Environment(lambda arch: (lambda a: EvalOutcome(a, (a,) * 32))(next(it)))


def test_criterion_4_reward_telescoping(criterion):
    start = time.perf_counter()
    env = Environment(SurrogateEvaluator(4), ImrEncoder(4))
    actor = TransformerNet("actor", np.random.default_rng(4))
    worst = 0.0
    for ep in range(100):
        rng = np.random.default_rng([4, ep])
        ro = run_rollout(env, actor, 0.3, rng, random_policy=ep % 2 == 0)
        total = sum(s.transition.reward for s in ro.steps)
        worst = max(worst, abs(total - (ro.final_accuracy - 0.10)))
    cases = [((6, 0.05, 0.95), (True, MAX_LAYERS_REASON)), ((3, 0.0005, 0.95), (True, MIN_IMPROVEMENT_REASON)),
             ((2, 0.05, 0.59), (True, LOW_ACCURACY_REASON)), ((5, 0.001, 0.60), (False, None)),
             ((1, -0.05, 0.65), (False, None)), ((6, -0.5, 0.2), (True, MAX_LAYERS_REASON)),
             ((2, 0.0009, 0.5), (True, MIN_IMPROVEMENT_REASON))]
    rules_ok = all(check_stop(*args) == want for args, want in cases)
    # same rules through the environment
    a = (0.5, 0.2, 0.9, 0.2)
    s = const_env([0.7, 0.8, 0.85, 0.9, 0.95, 0.97])
    st = s.reset()
    for _ in range(6):
        res = s.step(st, a)
        st = res.state
    rules_ok &= res.done and res.info["reason"] == MAX_LAYERS_REASON
    e = const_env([0.9, 0.9005])
    r1 = e.step(e.reset(), a)
    r2 = e.step(r1.state, a)
    rules_ok &= not r1.done and r2.done and r2.info["reason"] == MIN_IMPROVEMENT_REASON
    e = const_env([0.55])
    rules_ok &= e.step(e.reset(), a).info["reason"] == LOW_ACCURACY_REASON
    elapsed = time.perf_counter() - start
    criterion(4, "reward telescoping and stop rules", worst <= 1e-12 and rules_ok and elapsed < 60,
              f"100 episodes, max |sum - (final - 0.10)| = {worst:.1e}, {elapsed:.1f}s")


# 5 -----------------------------------------------------------------------------


def surrogate_optimum():
    """Exhaustive search over kind sequences (FCL only after FCL) with per-kind best hyper-parameters."""
    best, best_arch = 0.10, ()
    layers = {k: LayerSpec.make(k, **BEST_HP[k]) for k in KINDS}
    for n in range(1, MAX_LAYERS + 1):
        for kinds in itertools.product(KINDS, repeat=n):
            try:
                arch = ArchSpec((1, 28, 28), tuple(layers[k] for k in kinds))
            except IllegalLayerError:
                continue
            acc = surrogate_accuracy(arch)
            if acc > best:
                best, best_arch = acc, arch
    return best, best_arch


def test_criterion_5_learning_signal(criterion, tmp_path):
    start = time.perf_counter()
    optimum, opt_arch = surrogate_optimum()
    base = RunConfig.load(SURROGATE_CONFIG)
    assert (base.episodes, base.models_per_episode, base.opt_rounds_per_episode) == (30, 10, 5)
    exploit, random_mean, best = [], [], []
    for seed in (0, 1, 2):
        cfg = base.replace(seed=seed, out_dir=str(tmp_path / f"s{seed}"))
        res = run_search(cfg)
        exploit.append(np.mean(res.returns_for("exploit")))
        random_mean.append(np.mean(random_policy_returns(cfg, 100, SurrogateEvaluator(seed))))
        best.append(float(res.best["accuracy"]))
    ratios = [float(e / r) for e, r in zip(exploit, random_mean)]
    gain = np.mean(exploit) / np.mean(random_mean)
    elapsed = time.perf_counter() - start
    ok = gain >= 1.25 and min(ratios) >= 1.25 and min(best) >= 0.95 * optimum and elapsed < 1200
    criterion(5, "exploitation beats random by 25% and reaches 95% of the surrogate optimum", ok,
              f"return ratios {[round(r, 3) for r in ratios]}, best {[round(b, 4) for b in best]} "
              f"vs 0.95 x {optimum:.4f} = {0.95 * optimum:.4f} ({opt_arch}), {elapsed:.0f}s")


# 6 -----------------------------------------------------------------------------


def test_criterion_6_real_training(criterion):
    start = time.perf_counter()
    data = load_dataset(None, 2000, 512, seed=0)
    arch = ArchSpec((1, 28, 28), (conv(8, 3, 1), maxpool(2, 2, 0), fcl(128, True, "relu")))
    budget = TrainBudget(epochs=1, batch_size=16, lr=1e-2, seed=0)
    first = train_candidate(arch, data, budget)
    second = train_candidate(arch, data, budget)
    elapsed = time.perf_counter() - start
    same = first == second
    criterion(6, "desk-scale MNIST smoke test", first.overall_accuracy >= 0.90 and same and elapsed < 300,
              f"validation accuracy {first.overall_accuracy:.4f}, deterministic={same}, {elapsed:.1f}s")


# 7 -----------------------------------------------------------------------------


def test_criterion_7_transparency_reports(criterion, tmp_path):
    cfg = RunConfig.load(SURROGATE_CONFIG).replace(seed=0, out_dir=str(tmp_path / "run"))
    records = read_log(run_search(cfg).log_path)
    counts = report_layer_affinity(records)
    ranked = sorted(counts.items(), key=lambda kv: -kv[1])
    brute = {}
    for line in (Path(cfg.out_dir) / "run.jsonl").read_text().splitlines():
        rec = json.loads(line)
        if rec["type"] == "step" and rec["reward"] < 0:
            kinds = [l["kind"] for l in rec["arch"]["layers"]]
            key = (kinds[-2] if len(kinds) > 1 else "START", kinds[-1])
            brute[key] = brute.get(key, 0) + 1
    att = report_attention_diff(records)
    top_is_fcl = bool(ranked) and ranked[0][0] == (FCL, FCL) and (len(ranked) == 1 or ranked[1][1] < ranked[0][1])
    ok = top_is_fcl and dict(counts) == brute and att.status == "ok" and att.mean > 0
    criterion(7, "(FCL,FCL) ranks first; positive attention difference; counts match brute force", ok,
              f"top pairs {ranked[:2]}, attention mean {att.mean} over {len(att.differences)} pairs")


# 8 -----------------------------------------------------------------------------


def test_criterion_8_determinism_and_cache(criterion, tmp_path):
    base = RunConfig.load(SURROGATE_CONFIG).replace(episodes=8, exploration_episodes=6, seed=8)
    a = run_search(base.replace(out_dir=str(tmp_path / "a")))
    b = run_search(base.replace(out_dir=str(tmp_path / "b")))
    off = run_search(base.replace(out_dir=str(tmp_path / "off"), use_cache=False))
    seq_a, seq_b = json.dumps(a.reward_sequence()).encode(), json.dumps(b.reward_sequence()).encode()
    logged = [[r["reward"] for r in read_log(res.log_path) if r["type"] == "step"] for res in (a, off)]
    ok = seq_a == seq_b and logged[0] == logged[1] and a.evaluations < off.evaluations
    criterion(8, "byte-identical reward sequences; cache changes no reward", ok,
              f"{len(a.reward_sequence())} rewards, evaluations cached {a.evaluations} vs uncached {off.evaluations}")
