"""Acceptance criteria 1-12.

Each test records one PASS/FAIL line that is printed in the terminal summary.
Criteria 7-10 train every baseline at desk scale over five seeds; cells shared
between criteria are trained once per session.
"""

import math
import time

import numpy as np
import pytest

from tokencom.agents import DdpgAgent, DqnAgent, RbLimits, ddpg_act, decay_epsilon, is_feasible_assignment, \
    polyak_update
from tokencom.cli import main
from tokencom.config import parse_config
from tokencom.env import EpisodeConfig, ViolationFlags, reward_from
from tokencom.errors import AgreementImpossible, ProtocolViolation
from tokencom.experiments import aggregate, run_preset
from tokencom.nn import MLP
from tokencom.oracle import oracle_solve, sample_draws
from tokencom.tokenizers import (
    BaseStationEndpoint, SimulatedLink, UserEndpoint, VideoParams, compression_rate, load_catalog,
    parse_capability_message, parse_selection_message, required_bitrate, run_agreement,
)
from tokencom.training import AgentPolicy, BaselineKind, ZeroPowerPolicy, evaluate_on_draws, train

from conftest import ACCEPTANCE
import test_channel as channel_checks
from test_env import checker_disagreements
from test_nn import actor_fd_error, critic_fd_error, q_network_fd_error

CATALOG = load_catalog()
SEEDS = (0, 1, 2, 3, 4)


def record(n, ok, detail, elapsed=None, limit=None):
    timing = ""
    if elapsed is not None:
        timing = f" [{elapsed:.1f} s" + (f", target < {limit:g} s]" if limit else "]")
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}{timing}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def cells():
    return {}


def mean_by(rows, metric, **match):
    vals = [getattr(r, metric) for r in rows if all(getattr(r, k) == v for k, v in match.items())]
    return aggregate(vals)


# ---------------------------------------------------------------- formulas

def test_criterion_01_compression_and_bitrate():
    t = time.perf_counter()
    declared = (0.008, 0.063, 0.084, 0.127)
    etas = [compression_rate(s) for s in CATALOG]
    ok_eta = all(abs(e - d) <= 0.001 for e, d in zip(etas, declared))
    bitrate = required_bitrate(CATALOG[0], VideoParams(1080, 1920, 24.0))
    elapsed = time.perf_counter() - t
    ok = ok_eta and bitrate == 388_800 and elapsed < 1.0
    record(1, ok, f"eta {[round(e, 5) for e in etas]}, DV8 at 1080p {bitrate:.0f} bit/s", elapsed, 1)


def test_criterion_02_physical_layer():
    t = time.perf_counter()
    worst = channel_checks.scalar_oracle_error()
    for example in (channel_checks.test_hand_computed_single_user,
                    channel_checks.test_hand_computed_two_user_interference,
                    channel_checks.test_hand_computed_unassigned_user_gets_nothing):
        example()
    elapsed = time.perf_counter() - t
    record(2, worst < 1e-12 and elapsed < 10, f"worst relative error {worst:.2e} over 10^4 instances, "
           "3 hand examples exact", elapsed, 10)


def test_criterion_03_constraint_checker():
    t = time.perf_counter()
    bad = checker_disagreements()
    elapsed = time.perf_counter() - t
    record(3, bad == 0 and elapsed < 30, f"{bad} disagreements over 10^4 instances", elapsed, 30)


def test_criterion_04_gradients():
    t = time.perf_counter()
    errs = (q_network_fd_error(), critic_fd_error(), actor_fd_error())
    elapsed = time.perf_counter() - t
    record(4, max(errs) < 1e-5 and elapsed < 60,
           "max relative error Q {:.1e}, critic {:.1e}, actor {:.1e}".format(*errs), elapsed, 60)


def test_criterion_05_update_rules():
    online = MLP([1, 1], ["identity"], np.ones(2))
    target = MLP([1, 1], ["identity"], np.zeros(2))
    polyak_update(target, online, 0.005)
    polyak_ok = target.params.tolist() == [0.005, 0.005]

    agent = DqnAgent(3, 1, 1, 1, np.random.default_rng(0), hidden=(4,), gamma=0.98)
    decay_epsilon(agent)
    eps_one = agent.eps
    agent.eps = 0.05
    decay_epsilon(agent)
    eps_ok = eps_one == 0.995 and agent.eps == 0.05

    batch = {"state": np.zeros((1, 3)), "next_state": np.zeros((1, 3)), "action": np.zeros((1, 1)),
             "reward": np.array([1.0]), "done": np.array([False])}
    td = float(agent.td_target(batch, RbLimits(1, 0, 1), next_best=np.array([2.0]))[0])

    flags = ViolationFlags(True, True, True, False, False, False, False, False)
    rew = reward_from(1.0, flags, 2.0)
    ok = polyak_ok and eps_ok and td == 2.96 and rew == -5.0
    record(5, ok, f"polyak {target.params.tolist()}, eps {eps_one} then floor {agent.eps}, "
           f"TD target {td!r}, reward {rew!r}")


def test_criterion_06_feasible_by_construction():
    t = time.perf_counter()
    rng = np.random.default_rng(6)
    agents = {}
    violations = 0
    cases = 100_000
    for _ in range(cases):
        U, R, N, M = (int(x) for x in rng.integers(1, 5, size=4))
        cap = int(rng.integers(1, U + 1))
        k_max = int(rng.integers(0, R + 1))
        k_min = int(rng.integers(0, k_max + 1))
        if U * k_min > R * cap:
            k_min = 0
        limits = RbLimits(cap, k_min, k_max)
        sd = 4
        key = (U, R, N, M)
        if key not in agents:
            agents[key] = (DqnAgent(sd, U, R, M, rng, hidden=(8,)), DdpgAgent(sd, 2 * U * R * N, rng, hidden=(8,)))
        dqn, ddpg = agents[key]
        dqn.eps = float(rng.random())
        s = rng.standard_normal(sd) * 10 ** rng.uniform(-2, 3)
        kappa = dqn.select_allocation(s, limits, rng, explore=bool(rng.integers(2)))
        if not is_feasible_assignment(kappa, limits) or not np.isin(kappa, (0, 1)).all():
            violations += 1
        counts = rng.integers(1, M + 1, size=U)
        idx = dqn.select_tokenizers(s, counts, rng, explore=bool(rng.integers(2)))
        if np.any(idx < 1) or np.any(idx > counts):
            violations += 1
        P = float(10 ** rng.uniform(-3, 2))
        ddpg.noise = float(rng.uniform(0, 1))
        w = ddpg_act(ddpg, s, bool(rng.integers(2)), rng, kappa, P)
        if np.sum(np.abs(w) ** 2) > P * (1 + 1e-9) or w[kappa == 0].any():
            violations += 1
    elapsed = time.perf_counter() - t
    record(6, violations == 0, f"{violations} violations over {cases} fuzzed cases", elapsed)


# ---------------------------------------------------------------- learning and trends

@pytest.mark.slow
def test_criterion_07_learning_progress(cells):
    t = time.perf_counter()
    cfg = parse_config("preset=freezing-vs-episode\nbaselines=hybrid,fixed-ta")
    rows = run_preset(cfg, cache=cells)
    wins = []
    parts = []
    for seed in SEEDS:
        hyb = np.array([r.utility for r in rows if r.baseline == "hybrid" and r.seed == seed])
        fix = np.array([r.utility for r in rows if r.baseline == "fixed-ta" and r.seed == seed])
        first, last, fixed_last = hyb[:50].mean(), hyb[-50:].mean(), fix[-50:].mean()
        wins.append(last > first and last > fixed_last)
        parts.append(f"s{seed} {first:.3f}->{last:.3f} vs {fixed_last:.3f}")
    elapsed = time.perf_counter() - t
    record(7, sum(wins) >= 4, f"hybrid final-50 beats first-50 and fixed-ta in {sum(wins)}/5 seeds "
           f"({'; '.join(parts)})", elapsed, 600)


def tiny_instance():
    base = parse_config("N=2\nR=2\nU=2\nK_max=2\nkappa=2").desk_scaled()
    tags = [s.name_tag for s in CATALOG[:2]]
    ec = EpisodeConfig.build(base.channel_config(), base.video, CATALOG, capabilities=[tags, tags],
                             alpha=base.alpha, beta=base.beta, penalty=base.lambda_pen, q_min=base.q_min,
                             q_max=base.q_max, r_min=base.R_min, rb_cap=base.kappa, k_min=base.K_min,
                             k_max=base.K_max, slots=base.steps)
    return base, ec


@pytest.mark.slow
def test_criterion_08_oracle_proximity():
    t = time.perf_counter()
    base, ec = tiny_instance()
    draws = sample_draws(ec, 100, seed=12345)
    policies = {"zero-power": ZeroPowerPolicy()}
    for kind in (BaselineKind.HYBRID, BaselineKind.DDPG_TA, BaselineKind.AGNOSTIC_TA, BaselineKind.FIXED_TA):
        learner, _ = train(ec, kind, base.agent_settings(), seed=0)
        policies[kind.value] = AgentPolicy(learner)
    results = {name: evaluate_on_draws(p, ec, draws) for name, p in policies.items()}
    # policy decisions join the search so that off-grid powers cannot beat the grid optimum
    candidates = [[results[name][2][k] for name in results] for k in range(len(draws))]
    res = oracle_solve(ec, draws, candidates=candidates)
    oracle_util = float(np.nanmean(res.utilities))
    dominated = True
    for name, (utils, rewards, decisions) in results.items():
        dominated &= bool(np.all(res.rewards >= rewards))
        feasible = np.array([u == r for u, r in zip(utils, rewards)])
        dominated &= bool(np.all(res.utilities[feasible] >= utils[feasible]))
    hybrid = float(np.mean(results["hybrid"][0]))
    ratio = hybrid / oracle_util
    elapsed = time.perf_counter() - t
    summary = ", ".join(f"{n} {np.mean(u):.3f}" for n, (u, _, _) in results.items())
    record(8, ratio >= 0.7 and dominated and res.feasible.all(),
           f"oracle {oracle_util:.3f}, hybrid/oracle {ratio:.2f}, dominance {'holds' if dominated else 'broken'} "
           f"({summary})", elapsed, 300)


TREND_KINDS = "baselines=hybrid,agnostic-ta,fixed-ta,conventional-h265\n"


@pytest.mark.slow
def test_criterion_09_freezing_vs_resolution(cells):
    t = time.perf_counter()
    rows = run_preset(parse_config("preset=freezing-vs-resolution\nsweep=360,1080\n" + TREND_KINDS), cache=cells)
    f = {(b, h): mean_by(rows, "freezing_pct", baseline=b, sweep_value=h)[0]
         for b in ("hybrid", "agnostic-ta", "fixed-ta", "conventional-h265") for h in (360.0, 1080.0)}
    hi = {b: f[(b, 1080.0)] for b in ("hybrid", "agnostic-ta", "fixed-ta", "conventional-h265")}
    order = hi["hybrid"] <= hi["agnostic-ta"] <= hi["fixed-ta"]
    vs_h265 = hi["hybrid"] <= 0.5 * hi["conventional-h265"]
    low = all(f[(b, 360.0)] < 2.0 for b in hi)
    elapsed = time.perf_counter() - t
    detail = ("1080p freezing % " + ", ".join(f"{b} {v:.2f}" for b, v in hi.items())
              + "; 360p " + ", ".join(f"{b} {f[(b, 360.0)]:.2f}" for b in hi)
              + f"; hybrid<=agnostic<=fixed {order}, hybrid<=0.5*h265 {vs_h265}, 360p<2% {low}")
    record(9, order and vs_h265 and low, detail, elapsed, 1200)


PSNR_KINDS = "baselines=hybrid,fixed-ta,conventional-h265\n"


@pytest.mark.slow
def test_criterion_10_psnr_trends(cells):
    t = time.perf_counter()
    users = run_preset(parse_config("preset=psnr-vs-users\nsweep=2,4,8\n" + PSNR_KINDS), cache=cells)
    power = run_preset(parse_config("preset=psnr-vs-power\nsweep=20,30,40\n" + PSNR_KINDS), cache=cells)
    checks, parts = [], []
    for name, rows, xs, direction in (("users", users, (2.0, 4.0, 8.0), -1), ("power", power, (20.0, 30.0, 40.0), 1)):
        stats = {(b, x): mean_by(rows, "psnr_db", baseline=b, sweep_value=x)
                 for b in ("hybrid", "fixed-ta", "conventional-h265") for x in xs}
        hyb = [stats[("hybrid", x)] for x in xs]
        for (m0, s0, _), (m1, s1, _) in zip(hyb, hyb[1:]):
            if direction < 0:
                pooled = math.sqrt((s0 ** 2 + s1 ** 2) / 2)
                checks.append(m1 <= m0 + pooled)
            else:
                checks.append(m1 >= m0)
        for x in xs:
            checks.append(stats[("hybrid", x)][0] > stats[("conventional-h265", x)][0])
            checks.append(stats[("hybrid", x)][0] > stats[("fixed-ta", x)][0])
        fixed = {r.psnr_db for r in rows if r.baseline == "fixed-ta" and np.isfinite(r.psnr_db)}
        checks.append(fixed == {CATALOG[0].psnr})
        parts.append(f"{name}: hybrid " + "/".join(f"{m:.2f}" for m, _, _ in hyb)
                     + ", h265 " + "/".join(f"{stats[('conventional-h265', x)][0]:.2f}" for x in xs)
                     + ", fixed-ta " + "/".join(f"{stats[('fixed-ta', x)][0]:.2f}" for x in xs))
    elapsed = time.perf_counter() - t
    record(10, all(checks), f"{sum(checks)}/{len(checks)} ordering checks hold; " + "; ".join(parts), elapsed, 1200)


# ---------------------------------------------------------------- protocol and determinism

def test_criterion_11_protocol(capsys):
    t = time.perf_counter()
    code = main(["ta-demo", "--users", "4", "--full", "--seed", "0"])
    out = capsys.readouterr().out.splitlines()
    tags = [s.name_tag for s in CATALOG]
    bs = BaseStationEndpoint(CATALOG)
    link = SimulatedLink()
    users = [UserEndpoint(i, tags) for i in range(4)]
    agreed = run_agreement(bs, users, lambda uid, pairs: uid % len(pairs) + 1, link)
    roundtrip = True
    for msg in link.log:
        parse = parse_capability_message if msg.startswith(b"CAP") else parse_selection_message
        uid, payload = parse(msg)
        again = msg.startswith(b"CAP") and payload == tags or payload == agreed[uid].name_tag
        roundtrip &= again
    steps = sum(ln.startswith("CAP") for ln in out) == 4 and sum(ln.startswith("SEL") for ln in out) == 4
    try:
        UserEndpoint(0, tags[:1]).receive_selection(b"SEL 0 BSQ-VAE\n")
        violation = False
    except ProtocolViolation:
        violation = True
    try:
        BaseStationEndpoint(CATALOG).receive_capability(b"CAP 0 Unknown-Tokenizer\n")
        impossible = False
    except AgreementImpossible:
        impossible = True
    elapsed = time.perf_counter() - t
    ok = code == 0 and steps and roundtrip and len(link.log) == 8 and violation and impossible and elapsed < 1
    record(11, ok, f"4 users agreed, {len(link.log)} messages round-trip {roundtrip}, undeclared selection "
           f"rejected {violation}, empty intersection rejected {impossible}", elapsed, 1)


def test_criterion_12_determinism(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("episodes=3\nsteps=10\nbatch_size=8\nhidden=16\neval_episodes=2\nseeds=0,1\n"
                   "baselines=hybrid,ddpg-ta,conventional-h265\npreset=psnr-vs-users\nsweep=2,3\n")
    outputs = {}
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--config", str(cfg), "--seed", "5", "--out", str(out / "train")]) == 0
        ckpt = out / "train" / "checkpoints" / "hybrid_seed5.npz"
        assert main(["evaluate", "--config", str(cfg), "--seed", "5", "--out", str(out / "eval"),
                     "--checkpoint", str(ckpt)]) == 0
        assert main(["preset", "--config", str(cfg), "--out", str(out / "preset")]) == 0
        outputs[run] = {k: (out / k / "metrics.csv").read_bytes() for k in ("train", "eval", "preset")}
    same = {k: outputs["a"][k] == outputs["b"][k] for k in outputs["a"]}
    record(12, all(same.values()), "byte-identical metrics.csv for " + ", ".join(f"{k} {v}" for k, v in same.items()))
