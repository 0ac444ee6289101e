import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtdgpt.dataset import (
    N_ACTIONS,
    PREV_ACTION_DIM,
    MixedDataset,
    TokenCache,
    Trajectory,
    compute_rtg,
    detokenize,
    dumps_trajectory,
    mix_and_persist,
    prev_action_code,
    read_jsonl,
    rollout_expert,
    token_dim,
    token_matrix,
    tokenize,
    write_jsonl,
)
from mtdgpt.expert.networks import AttentionPolicyNet
from mtdgpt.sim.env import REWARD_QUANTUM, Cause, EnvConfig, IntersectionEnv
from mtdgpt.sim.geometry import TaskId
from mtdgpt.sim.traffic import TrafficConfig


def make_traj(rng, task=TaskId.TURN_LEFT, n=None, width=8, outcome=Cause.ARRIVED):
    n = int(rng.integers(1, 25)) if n is None else n
    rewards = np.round(rng.uniform(-1, 1, n) / REWARD_QUANTUM) * REWARD_QUANTUM
    return Trajectory(task, rng.normal(size=(n, width)), rng.integers(0, 3, n), rewards, outcome, int(rng.integers(1 << 30)))


def random_policy_trajectories(n_eps=8, seed=0):
    """Real environment episodes under uniform random actions."""
    cfg = EnvConfig()
    out = []
    for k in range(n_eps):
        task = TaskId(k % 3)
        env = IntersectionEnv(cfg, task)
        obs = env.reset(seed * 100 + k)
        rng = np.random.default_rng(k)
        S, A, R = [], [], []
        while True:
            a = int(rng.integers(3))
            S.append(obs.flat())
            A.append(a)
            step = env.step(a)
            R.append(step.reward)
            if step.terminated:
                out.append(Trajectory(task, S, A, R, step.cause, seed * 100 + k))
                break
            obs = step.obs
    return out


# ---------------------------------------------------------------- return-to-go
def test_rtg_small_example():
    assert compute_rtg([1.0, 2.0, 3.0]).tolist() == [6.0, 5.0, 3.0]


def test_rtg_single_step_and_empty():
    assert compute_rtg([0.25]).tolist() == [0.25]
    with pytest.raises(ValueError):
        compute_rtg([])


def test_rtg_matches_rational_suffix_sums_exactly():
    # quantized rewards: exact rational arithmetic is the oracle
    rng = np.random.default_rng(3)
    for _ in range(50):
        traj = make_traj(rng)
        g = compute_rtg(traj.rewards)
        exact = [float(sum(Fraction(x) for x in traj.rewards[t:])) for t in range(len(traj))]
        assert g.tolist() == exact


def test_rtg_arbitrary_floats_close_to_fsum():
    rng = np.random.default_rng(4)
    r = rng.normal(size=40)
    g = compute_rtg(r)
    assert np.allclose(g, [math.fsum(r[t:]) for t in range(40)], rtol=0, atol=1e-12)


def test_telescoping_exact_on_env_episodes():
    for traj in random_policy_trajectories(12):
        g = compute_rtg(traj.rewards)
        assert np.array_equal(g[:-1] - g[1:], traj.rewards[:-1])
        assert g[-1] == traj.rewards[-1]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-(2**21), 2**21), min_size=1, max_size=60))
def test_telescoping_holds_for_any_quantized_rewards(ints):
    r = np.array(ints, dtype=np.float64) * REWARD_QUANTUM
    g = compute_rtg(r)
    assert np.array_equal(g[:-1] - g[1:], r[:-1])


# ---------------------------------------------------------------- tokens
def test_prev_action_codes():
    assert prev_action_code(None).tolist() == [0, 0, 0, 1]
    assert prev_action_code(2).tolist() == [0, 0, 1, 0]


def test_token_layout_and_width():
    rng = np.random.default_rng(5)
    traj = make_traj(rng, n=4)
    toks = tokenize(traj)
    assert len(toks) == 4
    assert toks[0].prev_action.tolist() == [0, 0, 0, 1]
    for t in range(1, 4):
        assert int(np.argmax(toks[t].prev_action)) == traj.actions[t - 1]
        assert toks[t].prev_action[N_ACTIONS] == 0
    assert [tk.label for tk in toks] == traj.actions.tolist()
    assert toks[0].vector().shape == (token_dim(8),) == (8 + PREV_ACTION_DIM + 1,)
    assert token_dim(32) == 37


def test_detokenize_inverts_tokenize():
    rng = np.random.default_rng(6)
    for _ in range(20):
        traj = make_traj(rng)
        s, a, g = detokenize(tokenize(traj))
        assert np.array_equal(s, traj.states)
        assert np.array_equal(a, traj.actions)
        assert np.array_equal(g, compute_rtg(traj.rewards))


def test_detokenize_rejects_inconsistent_prev_action():
    rng = np.random.default_rng(7)
    toks = tokenize(make_traj(rng, n=3))
    toks[2].prev_action = prev_action_code((toks[1].label + 1) % 3)
    with pytest.raises(ValueError, match="token 2"):
        detokenize(toks)
    with pytest.raises(ValueError):
        detokenize([])


def test_token_matrix_equals_stacked_tokens():
    rng = np.random.default_rng(8)
    for _ in range(10):
        traj = make_traj(rng)
        assert np.array_equal(token_matrix(traj), np.stack([t.vector() for t in tokenize(traj)]))


# ---------------------------------------------------------------- trajectory validation and JSONL
def test_trajectory_validation():
    s = np.zeros((3, 8))
    with pytest.raises(ValueError):
        Trajectory(TaskId.TURN_LEFT, s, [0, 1], [0.0, 0.0, 0.0], Cause.ARRIVED)
    with pytest.raises(ValueError):
        Trajectory(TaskId.TURN_LEFT, s, [0, 1, 3], [0.0, 0.0, 0.0], Cause.ARRIVED)
    with pytest.raises(ValueError):
        Trajectory(TaskId.TURN_LEFT, s, [0, 1, 2], [0.0, np.nan, 0.0], Cause.ARRIVED)
    with pytest.raises(ValueError):
        Trajectory(TaskId.TURN_LEFT, np.zeros((0, 8)), [], [], Cause.ARRIVED)


def test_jsonl_save_load_save_byte_identical(tmp_path):
    trajs = random_policy_trajectories(9)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_jsonl(a, trajs)
    back = read_jsonl(a)
    write_jsonl(b, back)
    assert a.read_bytes() == b.read_bytes()
    for x, y in zip(trajs, back):
        assert np.array_equal(x.states, y.states) and np.array_equal(x.rewards, y.rewards)
        assert x.task == y.task and x.outcome == y.outcome and x.seed == y.seed


def test_jsonl_line_format():
    rng = np.random.default_rng(9)
    rec = json.loads(dumps_trajectory(make_traj(rng, task=TaskId.GO_STRAIGHT, n=2)))
    assert rec["version"] == 1 and rec["task"] == "straight" and rec["outcome"] == "arrived"
    assert len(rec["steps"]) == 2 and len(rec["steps"][0]) == 3
    assert "rtg" not in rec


def test_jsonl_errors_name_the_line(tmp_path):
    rng = np.random.default_rng(10)
    p = tmp_path / "bad.jsonl"
    good = dumps_trajectory(make_traj(rng))
    bad = json.loads(good)
    bad["version"] = 99
    p.write_text(good + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(ValueError, match=r"bad.jsonl:2"):
        read_jsonl(p)


# ---------------------------------------------------------------- mixing and windows
def test_mix_truncates_to_smallest_and_orders_tasks(tmp_path):
    rng = np.random.default_rng(11)
    left = [make_traj(rng, TaskId.TURN_LEFT) for _ in range(5)]
    straight = [make_traj(rng, TaskId.GO_STRAIGHT) for _ in range(3)]
    right = [make_traj(rng, TaskId.TURN_RIGHT) for _ in range(4)]
    mixed = mix_and_persist(left, straight, right, tmp_path / "m.jsonl")
    assert len(mixed) == 9
    assert [t.task for t in mixed.trajectories] == [TaskId.TURN_LEFT] * 3 + [TaskId.GO_STRAIGHT] * 3 + [TaskId.TURN_RIGHT] * 3
    assert mixed.task_counts() == {TaskId.TURN_LEFT: 3, TaskId.GO_STRAIGHT: 3, TaskId.TURN_RIGHT: 3}
    assert len(MixedDataset.load(tmp_path / "m.jsonl")) == 9


def test_mix_rejects_missing_or_wrong_task():
    rng = np.random.default_rng(12)
    left = [make_traj(rng, TaskId.TURN_LEFT)]
    right = [make_traj(rng, TaskId.TURN_RIGHT)]
    with pytest.raises(ValueError, match="straight"):
        mix_and_persist(left, [], right)
    with pytest.raises(ValueError):
        mix_and_persist(left, right, right)


def test_window_index_and_padding():
    rng = np.random.default_rng(13)
    trajs = [make_traj(rng, TaskId(k % 3), n=n) for k, n in enumerate([3, 7, 5])]
    ds = MixedDataset(trajs)
    idx = ds.window_index()
    assert len(idx) == 15
    cache = TokenCache(ds)
    batch = cache.batch(idx, context=4)
    assert batch.tokens.shape == (15, 4, ds.token_dim)
    # window (1, 5) of the 7-step trajectory holds 2 real tokens
    k = int(np.flatnonzero((idx[:, 0] == 1) & (idx[:, 1] == 5))[0])
    assert batch.weights[k].tolist() == [1, 1, 0, 0]
    assert np.array_equal(batch.tokens[k, :2], token_matrix(trajs[1])[5:7])
    assert np.all(batch.tokens[k, 2:] == 0)
    assert batch.labels[k, :2].tolist() == trajs[1].actions[5:7].tolist()


def test_sample_windows_task_uniform():
    rng = np.random.default_rng(14)
    trajs = [make_traj(rng, TaskId.TURN_LEFT) for _ in range(30)] + [make_traj(rng, TaskId.TURN_RIGHT) for _ in range(2)]
    trajs += [make_traj(rng, TaskId.GO_STRAIGHT) for _ in range(5)]
    ds = MixedDataset(trajs)
    pairs = ds.sample_windows(np.random.default_rng(0), 6000)
    tasks = np.array([ds.trajectories[i].task for i, _ in pairs])
    frac = np.bincount(tasks, minlength=3) / len(tasks)
    assert np.all(np.abs(frac - 1 / 3) < 0.03)
    assert all(0 <= s < len(ds.trajectories[i]) for i, s in pairs)


def test_dataset_rejects_mixed_widths():
    rng = np.random.default_rng(15)
    with pytest.raises(ValueError):
        MixedDataset([make_traj(rng, width=8), make_traj(rng, width=12)])
    with pytest.raises(ValueError):
        MixedDataset([])


# ---------------------------------------------------------------- expert rollouts
def test_rollout_expert_deterministic_and_filtered():
    policy = AttentionPolicyNet(np.random.default_rng(0), 4, 8, 2, 8)
    cfg = EnvConfig(traffic=TrafficConfig(n_min=0, n_max=2))
    a = rollout_expert(cfg, TaskId.GO_STRAIGHT, policy, 6, seed=3)
    b = rollout_expert(cfg, TaskId.GO_STRAIGHT, policy, 6, seed=3)
    assert len(a) == 6
    assert [dumps_trajectory(t) for t in a] == [dumps_trajectory(t) for t in b]
    wins = rollout_expert(cfg, TaskId.GO_STRAIGHT, policy, 6, seed=3, keep_filter="successes")
    assert len(wins) == sum(t.success for t in a)
    assert all(t.success for t in wins)
    with pytest.raises(ValueError):
        rollout_expert(cfg, TaskId.GO_STRAIGHT, policy, 2, seed=3, keep_filter="best")


def test_rollout_parallel_matches_serial():
    policy = AttentionPolicyNet(np.random.default_rng(1), 4, 8, 2, 8)
    cfg = EnvConfig(traffic=TrafficConfig(n_min=1, n_max=2))
    a = rollout_expert(cfg, TaskId.TURN_RIGHT, policy, 4, seed=9, workers=1)
    b = rollout_expert(cfg, TaskId.TURN_RIGHT, policy, 4, seed=9, workers=2)
    assert [dumps_trajectory(t) for t in a] == [dumps_trajectory(t) for t in b]
