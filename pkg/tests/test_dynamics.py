import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from continuum.builders import build_topology
from continuum.dynamics import (
    DegradePolicy, KillPolicy, LinkFailurePolicy, PolicyError, Trace, UserLoadPolicy, degrade_step, kill_step,
    load_trace_csv, mean_user_delay, parse_policy, synthetic_trace, user_delay, user_delays, user_step,
)
from continuum.environment import Environment
from continuum.graph import NoRoute
from continuum.rng import stream
from conftest import line_infra


def test_degrade_midpoint():
    infra = line_infra((1.0,), cpu=8.0)
    policy = DegradePolicy(50, horizon=100)
    degrade_step(policy, infra, 50)
    assert infra.capacity("n0")["cpu"] == pytest.approx(8 * (1 - 0.5 * 0.5))


def test_degrade_endpoints():
    infra = line_infra((1.0,), cpu=8.0)
    policy = DegradePolicy(50, horizon=100)
    degrade_step(policy, infra, 0)
    assert infra.capacity("n0")["cpu"] == 8
    degrade_step(policy, infra, 100)
    assert infra.capacity("n0")["cpu"] == pytest.approx(4)
    degrade_step(policy, infra, 500)
    assert infra.capacity("n0")["cpu"] == pytest.approx(4)
    # non-additive assets are untouched
    assert infra.capacity("n0")["processing_time"] == 1.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 100), st.integers(1, 500), st.lists(st.integers(0, 1000), min_size=2, max_size=20))
def test_degrade_monotone_and_bounded(floor, horizon, ticks):
    policy = DegradePolicy(floor, horizon=horizon)
    factors = [policy.factor(t) for t in sorted(ticks)]
    assert all(b <= a + 1e-12 for a, b in zip(factors, factors[1:]))
    assert all(f >= floor / 100 - 1e-12 for f in factors)


def test_kill_all():
    infra = build_topology("star", 10, {}, seed=0)
    kill_step(KillPolicy(100), infra, 1, stream(0, "k"))
    assert infra.active_nodes() == []


def test_kill_domain():
    with pytest.raises(PolicyError):
        KillPolicy(0)
    with pytest.raises(PolicyError):
        KillPolicy(101)
    with pytest.raises(PolicyError):
        DegradePolicy(120)


def test_kill_draws_one_per_node():
    infra = build_topology("random", 25, {}, seed=0)
    rng = stream(3, "policy/kill")
    twin = stream(3, "policy/kill")
    for t in range(5):
        kill_step(KillPolicy(20), infra, t, rng)
        twin.random(25)
    assert rng.random() == twin.random()


def test_kill_protect_and_tiers():
    infra = build_topology("hierarchical", 30, {}, seed=0)
    hub = infra.nodes[0]
    policy = KillPolicy(100, protect=(hub,), tiers=("edge",))
    kill_step(policy, infra, 1, stream(0, "k"))
    assert infra.is_active(hub)
    for n in infra.nodes:
        assert infra.is_active(n) == (infra.node_attrs(n)["tier"] != "edge")


def test_kill_revive_restores_capacity():
    infra = line_infra((1.0,), cpu=8.0)
    infra.set_capacity("n0", "cpu", 2.0)
    infra.set_active("n0", False)
    policy = KillPolicy(100)
    # revive probability 0.5 at X=100: draw until it comes back
    rng = stream(0, "k")
    for t in range(50):
        if infra.is_active("n0"):
            break
        kill_step(KillPolicy(100, protect=("n1",)), infra, t, rng)
    assert infra.capacity("n0")["cpu"] == 8.0
    assert policy.revive_prob == 0.5


@pytest.mark.parametrize("x", [5, 20, 50])
def test_kill_stationary_fraction_short(x):
    infra = build_topology("random", 100, {}, seed=1)
    rng = stream(1, "policy/kill")
    policy = KillPolicy(x)
    fracs = []
    for t in range(4000):
        kill_step(policy, infra, t, rng)
        if t >= 500:
            fracs.append(len(infra.active_nodes()) / 100)
    oracle = (x / 2) / (x + x / 2)
    assert np.mean(fracs) == pytest.approx(oracle, abs=0.05)


def test_parse_policy():
    assert isinstance(parse_policy("degrade(50)", horizon=10), DegradePolicy)
    k = parse_policy("kill(5)")
    assert isinstance(k, KillPolicy) and k.pct == 5
    with pytest.raises(PolicyError):
        parse_policy("explode(3)")


# -- users ----------------------------------------------------------------------------------


def user_env():
    infra = line_infra((5.0, 5.0))
    env = Environment(infra)
    env.hub = "n0"
    return env


def test_user_doubling_and_halving():
    env = user_env()
    trace = Trace({1: {"n1": 3, "n2": 5}})
    policy = UserLoadPolicy(trace, ((1000, 2), (2000, 0.5)), hub="n0")
    user_step(policy, env, 1)
    assert env.users == {"n1": 3, "n2": 5}
    user_step(policy, env, 500)  # no row: unchanged
    assert env.users == {"n1": 3, "n2": 5}
    user_step(policy, env, 1000)
    assert env.users == {"n1": 6, "n2": 10}
    user_step(policy, env, 2000)
    assert env.users == {"n1": 3, "n2": 5}
    user_step(policy, env, 3000)
    assert env.users == {"n1": 3, "n2": 5}


def test_halving_floors():
    env = user_env()
    policy = UserLoadPolicy(Trace({1: {"n1": 3}}), ((2, 0.5),))
    user_step(policy, env, 1)
    user_step(policy, env, 2)
    assert env.users == {"n1": 1}


def test_modifiers_validated():
    with pytest.raises(PolicyError):
        UserLoadPolicy(Trace(), ((10, 3),))


def test_user_delay_formula():
    infra = line_infra((5.0,))
    assert user_delay(infra, "n1", "n0", 3) == pytest.approx(5 + 3 * math.log(4))
    assert user_delay(infra, "n1", "n0", 3) == pytest.approx(9.158883, abs=1e-6)
    assert user_delay(infra, "n1", "n0", 0) == 5
    assert user_delay(infra, "n0", "n0", 3) == pytest.approx(3 * math.log(4))
    infra.set_active("n0", False)
    with pytest.raises(NoRoute):
        user_delay(infra, "n1", "n0", 3)


@given(st.integers(0, 10_000))
def test_user_delay_strictly_increasing(uc):
    infra = line_infra((5.0,))
    assert user_delay(infra, "n1", "n0", uc + 1) > user_delay(infra, "n1", "n0", uc)


def test_user_delays_single_search_agrees():
    env = user_env()
    env.users = {"n0": 2, "n1": 3, "n2": 7}
    delays = user_delays(env)
    for n in env.infra.nodes:
        assert delays[n] == pytest.approx(user_delay(env.infra, n, "n0", env.users[n]))
    assert mean_user_delay(env) == pytest.approx(sum(delays.values()) / 3)


def test_trace_csv_round_trip(tmp_path):
    trace = synthetic_trace(["a", "b", "c"], 50, total=300, period=10, seed=2)
    p = tmp_path / "trace.csv"
    trace.to_csv(p)
    assert load_trace_csv(p).rows == trace.rows
    bad = tmp_path / "bad.csv"
    bad.write_text("t,node,u\n1,a,2\n")
    with pytest.raises(PolicyError):
        load_trace_csv(bad)


def test_synthetic_trace_shape():
    nodes = [f"n{i:03d}" for i in range(187)]
    trace = synthetic_trace(nodes, 1000, total=3000, period=10, seed=1)
    assert sorted(trace.rows) == list(range(1, 1001, 10))
    totals = [sum(r.values()) for r in trace.rows.values()]
    assert 2500 < np.mean(totals) < 3500
    assert synthetic_trace(nodes, 100, seed=1).rows == synthetic_trace(nodes, 100, seed=1).rows


def test_link_failure():
    env = Environment(line_infra((5.0,)))
    policy = LinkFailurePolicy(3, ("n0", "n1"), 10)
    for t in range(1, 6):
        policy.step(env, t)
    assert env.infra.link_capacity("n0", "n1")["latency"] == 50
