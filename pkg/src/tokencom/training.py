"""Training loop shared by the hybrid agent and its baselines, plus greedy evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .agents import (
    DdpgAgent, DqnAgent, RbLimits, ReplayBuffer, Transition, beam_multiplier,
    beamformer_from_raw, greedy_decode, masked_argmax,
)
from .env import (
    FLAG_NAMES, AllocationDecision, EnvState, EpisodeConfig, SlotOutcome, TokenComEnv,
    build_state_vector,
)
from .errors import ConfigurationError
from .nn import load_networks, save_networks


class BaselineKind(str, Enum):
    HYBRID = "hybrid"
    DDPG_TA = "ddpg-ta"
    AGNOSTIC_TA = "agnostic-ta"
    FIXED_TA = "fixed-ta"
    CONVENTIONAL_H265 = "conventional-h265"

    @classmethod
    def parse(cls, text: str) -> "BaselineKind":
        key = text.strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == key or kind.name.lower().replace("_", "-") == key:
                return kind
        raise ConfigurationError(f"unknown baseline {text!r}; choose from {[k.value for k in cls]}")


@dataclass(frozen=True)
class AgentSettings:
    hidden: tuple[int, ...] = (256, 256)
    lr_q: float = 1e-3
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    gamma: float = 0.98
    tau: float = 0.005
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay: float = 0.995
    noise_start: float = 0.2
    noise_end: float = 0.02
    noise_decay: float = 0.995
    noise_kind: str = "gaussian"
    batch_size: int = 256
    buffer_size: int = 100_000
    episodes: int = 500

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ConfigurationError("tau must lie in (0, 1)")
        if not 0 <= self.gamma <= 1:
            raise ConfigurationError("gamma must lie in [0, 1]")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ConfigurationError("need 0 <= eps_end <= eps_start <= 1")
        if self.batch_size < 1 or self.buffer_size < self.batch_size:
            raise ConfigurationError("need 1 <= batch_size <= buffer_size")
        if self.episodes < 1:
            raise ConfigurationError("episodes must be >= 1")


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    mean_reward: float
    mean_utility: float
    freezing_pct: float
    mean_psnr: float
    violations: tuple[int, ...]
    epsilon: float
    noise: float
    wall_clock: float
    indices: tuple[int, ...] = ()


@dataclass
class TrainingLog:
    records: list[EpisodeRecord] = field(default_factory=list)
    evaluations: list[EpisodeRecord] = field(default_factory=list)
    updates: int = 0

    def column(self, name: str, evaluations: bool = False) -> np.ndarray:
        rows = self.evaluations if evaluations else self.records
        return np.array([getattr(r, name) for r in rows], float)


class EpisodeStats:
    """Accumulates slot outcomes into an :class:`EpisodeRecord`."""

    def __init__(self):
        self.rewards, self.utilities = [], []
        self.frozen = 0
        self.user_slots = 0
        self.psnr_sum = 0.0
        self.delivered = 0
        self.violations = np.zeros(len(FLAG_NAMES), int)

    def add(self, out: SlotOutcome) -> None:
        self.rewards.append(out.reward)
        self.utilities.append(out.utility)
        self.frozen += int(out.frozen.sum())
        self.user_slots += out.frozen.size
        ok = ~out.frozen
        self.psnr_sum += float(out.psnr[ok].sum())
        self.delivered += int(ok.sum())
        self.violations += np.array(out.flags, int)

    def record(self, episode: int, eps: float, noise: float, wall: float, indices=()) -> EpisodeRecord:
        # PSNR is averaged over delivered (non-frozen) user-slots only
        psnr = self.psnr_sum / self.delivered if self.delivered else float("nan")
        return EpisodeRecord(
            episode=episode,
            mean_reward=float(np.mean(self.rewards)),
            mean_utility=float(np.mean(self.utilities)),
            freezing_pct=100.0 * self.frozen / self.user_slots,
            mean_psnr=psnr,
            violations=tuple(int(v) for v in self.violations),
            epsilon=eps, noise=noise, wall_clock=wall,
            indices=tuple(int(i) for i in indices),
        )


# ---------------------------------------------------------------- learner

class Learner:
    """Agents, buffers and decision rules for one baseline kind."""

    def __init__(self, cfg: EpisodeConfig, kind: BaselineKind, settings: AgentSettings,
                 rng: np.random.Generator):
        kind = BaselineKind(kind)
        if (kind is BaselineKind.CONVENTIONAL_H265) != (cfg.codec == "h265"):
            raise ConfigurationError("the H.265 baseline needs codec='h265' and only it may use it")
        self.cfg, self.kind, self.settings = cfg, kind, settings
        U, R, N = cfg.channel.shape
        self.U, self.R, self.N = U, R, N
        self.M = cfg.max_pairs
        self.limits = RbLimits.of(cfg)
        self.limits.check(U, R)
        self.bf_dim = 2 * U * R * N
        D = cfg.state_dim
        s = settings
        self.dqn = None
        if kind is not BaselineKind.DDPG_TA:
            tok_mode = {BaselineKind.HYBRID: "per_user", BaselineKind.AGNOSTIC_TA: "shared"}.get(kind, "none")
            self.dqn = DqnAgent(D, U, R, self.M, rng, tok_mode=tok_mode, hidden=s.hidden, lr=s.lr_q,
                                gamma=s.gamma, tau=s.tau, eps_start=s.eps_start, eps_end=s.eps_end,
                                eps_decay=s.eps_decay)
            self.b1 = ReplayBuffer(s.buffer_size, D, U * R,
                                   extras={"indices": U, "has_tok": 1, "pre_state": D})
            action_dim = self.bf_dim
        else:
            action_dim = self.bf_dim + U * self.M + U * R
        self.ddpg = DdpgAgent(D, action_dim, rng, hidden=s.hidden, lr_actor=s.lr_actor, lr_critic=s.lr_critic,
                              gamma=s.gamma, tau=s.tau, noise_start=s.noise_start, noise_end=s.noise_end,
                              noise_decay=s.noise_decay, noise_kind=s.noise_kind)
        self.b2 = ReplayBuffer(s.buffer_size, D, action_dim, extras={"mult": action_dim})
        self.updates = 0

    # -- schedule state
    @property
    def epsilon(self) -> float:
        return self.dqn.eps if self.dqn else 0.0

    @property
    def noise(self) -> float:
        return self.ddpg.sigma

    # -- action pieces
    def _mult(self, kappa: np.ndarray) -> np.ndarray:
        m = beam_multiplier(kappa, self.N)
        if self.kind is BaselineKind.DDPG_TA:
            lead = m.shape[:-1]
            m = np.concatenate([m, np.ones(lead + (self.U * self.M + self.U * self.R,))], axis=-1)
        return m

    def _ta_coords(self, raw: np.ndarray):
        tok = raw[self.bf_dim:self.bf_dim + self.U * self.M].reshape(self.U, self.M)
        alloc = raw[self.bf_dim + self.U * self.M:].reshape(self.U, self.R)
        return tok, alloc

    def choose_tokenizers(self, s_pre: np.ndarray, explore: bool, rng: np.random.Generator):
        """Pair indices at episode start; for DDPG-TA also the raw first-slot action."""
        counts = self.cfg.pair_counts
        if self.kind is BaselineKind.DDPG_TA:
            raw = self.ddpg.act(s_pre, rng, explore)
            tok, _ = self._ta_coords(raw)
            return masked_argmax(tok, counts), raw
        if self.kind is BaselineKind.FIXED_TA:
            return np.ones(self.U, int), None
        return self.dqn.select_tokenizers(s_pre, counts, rng, explore), None

    def act(self, s: np.ndarray, explore: bool, rng: np.random.Generator, raw: np.ndarray | None = None):
        """``(kappa, w, critic action, multiplier)`` for state vector ``s``."""
        if self.kind is BaselineKind.DDPG_TA:
            if raw is None:
                raw = self.ddpg.act(s, rng, explore)
            kappa = greedy_decode(self._ta_coords(raw)[1], self.limits)
        else:
            kappa = self.dqn.select_allocation(s, self.limits, rng, explore)
            raw = self.ddpg.act(s, rng, explore)
        w = beamformer_from_raw(raw[:self.bf_dim], kappa, self.cfg.channel.bs_power)
        mult = self._mult(kappa)
        return kappa, w, raw * mult, mult

    # -- learning
    def remember(self, s, s_pre, kappa, indices, first, a_crit, mult, reward, s_next, done) -> None:
        if self.dqn is not None:
            self.b1.push(Transition(s, kappa.ravel(), reward, s_next, done, {
                "indices": indices, "has_tok": float(first), "pre_state": s_pre}))
        self.b2.push(Transition(s, a_crit, reward, s_next, done, {"mult": mult}))

    def ready(self) -> bool:
        bs = self.settings.batch_size
        return self.b2.ready(bs) and (self.dqn is None or self.b1.ready(bs))

    def _next_mult(self, next_states: np.ndarray, next_raw: np.ndarray) -> np.ndarray:
        if self.kind is BaselineKind.DDPG_TA:
            alloc = next_raw[:, self.bf_dim + self.U * self.M:].reshape(-1, self.U, self.R)
            return self._mult(greedy_decode(alloc, self.limits))
        kappa, _ = self.dqn.greedy_next(next_states, self.limits)
        return self._mult(kappa)

    def update(self, rng: np.random.Generator) -> bool:
        """One learning step for every network once both buffers hold a batch.

        Both buffers receive every slot in lockstep, so one index draw serves
        both and the target network's greedy next assignment is shared by the
        DQN and critic targets.
        """
        if not self.ready():
            return False
        idx = self.b2.sample_indices(self.settings.batch_size, rng)
        batch = self.b2.gather(idx)
        if self.dqn is not None:
            b1 = self.b1.gather(idx)
            next_kappa, next_best = self.dqn.greedy_next(b1["next_state"], self.limits)
            self.dqn.td_update(b1, self.limits, next_best)
            next_mult = self._mult(next_kappa)
            self.ddpg.critic_update(batch, lambda s2, raw2: next_mult)
        else:
            self.ddpg.critic_update(batch, self._next_mult)
        self.ddpg.actor_update(batch)
        if self.dqn is not None:
            self.dqn.soft_update()
        self.ddpg.soft_update()
        self.updates += 1
        return True

    def end_episode(self) -> None:
        if self.dqn is not None:
            self.dqn.decay_epsilon()
        self.ddpg.decay_noise()

    # -- checkpoints
    def networks(self) -> dict:
        nets = {"actor": self.ddpg.actor, "actor_target": self.ddpg.actor_target,
                "critic": self.ddpg.critic, "critic_target": self.ddpg.critic_target}
        if self.dqn is not None:
            nets.update(q=self.dqn.q, q_target=self.dqn.q_target)
        return nets

    def save(self, path: str | Path) -> None:
        extra = {"kind": np.array(self.kind.value), "epsilon": np.array(self.epsilon),
                 "noise": np.array(self.noise), "updates": np.array(self.updates)}
        opts = {"actor_opt": self.ddpg.actor_opt, "critic_opt": self.ddpg.critic_opt}
        if self.dqn is not None:
            opts["q_opt"] = self.dqn.opt
        for name, opt in opts.items():
            for k, v in opt.state_arrays().items():
                extra[f"{name}.{k}"] = v
        save_networks(path, self.networks(), extra)

    def load(self, path: str | Path) -> None:
        nets, extra = load_networks(path)
        if str(extra["kind"]) != self.kind.value:
            raise ConfigurationError(f"{path} holds a {extra['kind']} checkpoint, not {self.kind.value}")
        for name, net in self.networks().items():
            if nets[name].sizes != net.sizes:
                raise ConfigurationError(f"{path}: network {name} has a different shape")
            net.params[:] = nets[name].params
        opts = {"actor_opt": self.ddpg.actor_opt, "critic_opt": self.ddpg.critic_opt}
        if self.dqn is not None:
            opts["q_opt"] = self.dqn.opt
            self.dqn.eps = float(extra["epsilon"])
        for name, opt in opts.items():
            opt.load_arrays({k: extra[f"{name}.{k}"] for k in ("m", "v", "t", "hyper")})
        self.ddpg.sigma = float(extra["noise"])
        self.updates = int(extra["updates"])


# ---------------------------------------------------------------- episodes

def run_episode(env: TokenComEnv, learner: Learner, rng: np.random.Generator, explore: bool,
                learn: bool, update_rng: np.random.Generator | None = None,
                h0: np.ndarray | None = None) -> tuple[EpisodeStats, np.ndarray]:
    cfg = env.cfg
    state = env.reset(h0)
    s_pre = build_state_vector(state, cfg)
    first_raw = None
    if cfg.codec == "h265":
        indices = np.ones(cfg.num_users, int)
    else:
        indices, first_raw = learner.choose_tokenizers(s_pre, explore, rng)
        state = env.apply_tokenizer_selection(state, indices)
    stats = EpisodeStats()
    s = build_state_vector(state, cfg)
    while not state.done:
        first = state.t == 1
        kappa, w, a_crit, mult = learner.act(s_pre if first_raw is not None and first else s, explore, rng,
                                             raw=first_raw if first else None)
        decision = AllocationDecision(kappa, w, None if cfg.codec == "h265" else indices)
        nxt, out = env.step(state, decision)
        stats.add(out)
        s_next = build_state_vector(nxt, cfg)
        if learn:
            # DDPG-TA acted on the pre-selection state in slot 1, so that is what it stores
            s_stored = s_pre if (first and first_raw is not None) else s
            learner.remember(s_stored, s_pre, kappa, indices, first, a_crit, mult, out.reward, s_next, nxt.done)
            learner.update(update_rng)
        state, s = nxt, s_next
    return stats, indices


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def train(cfg: EpisodeConfig, kind: BaselineKind, settings: AgentSettings, seed: int,
          eval_every: int = 0, eval_seed: int | None = None) -> tuple[Learner, TrainingLog]:
    """Run the full training schedule; deterministic for a given ``seed``.

    With ``eval_every > 0`` a greedy evaluation episode is run after every
    ``eval_every``-th training episode on a separate channel stream.
    """
    init_rng, env_rng, act_rng, sample_rng, eval_rng = _streams(seed, 5)
    if eval_seed is not None:
        eval_rng = np.random.default_rng(eval_seed)
    learner = Learner(cfg, kind, settings, init_rng)
    env = TokenComEnv(cfg, env_rng)
    eval_env = TokenComEnv(cfg, eval_rng)
    log = TrainingLog()
    start = time.perf_counter()
    for ep in range(1, settings.episodes + 1):
        eps, sigma = learner.epsilon, learner.noise
        stats, idx = run_episode(env, learner, act_rng, explore=True, learn=True, update_rng=sample_rng)
        learner.end_episode()
        log.records.append(stats.record(ep, eps, sigma, time.perf_counter() - start, idx))
        if eval_every and ep % eval_every == 0:
            est, eidx = run_episode(eval_env, learner, act_rng, explore=False, learn=False)
            log.evaluations.append(est.record(ep, 0.0, 0.0, time.perf_counter() - start, eidx))
    log.updates = learner.updates
    return learner, log


# ---------------------------------------------------------------- evaluation

class Policy(Protocol):
    def choose(self, env: TokenComEnv, state: EnvState, s_pre: np.ndarray) -> np.ndarray | None: ...

    def decide(self, env: TokenComEnv, state: EnvState, s: np.ndarray) -> AllocationDecision: ...


class AgentPolicy:
    """Greedy (no exploration) wrapper around a trained :class:`Learner`."""

    def __init__(self, learner: Learner):
        self.learner = learner
        self._rng = np.random.default_rng(0)  # unused when exploration is off
        self._first_raw = None

    def choose(self, env, state, s_pre):
        idx, self._first_raw = self.learner.choose_tokenizers(s_pre, False, self._rng)
        self._s_pre = s_pre
        return idx

    def decide(self, env, state, s):
        first = state.t == 1 and self._first_raw is not None
        kappa, w, _, _ = self.learner.act(self._s_pre if first else s, False, self._rng,
                                          raw=self._first_raw if first else None)
        return AllocationDecision(kappa, w, state.indices)


class ZeroPowerPolicy:
    """Assigns nothing and radiates nothing; every user freezes."""

    def __init__(self, indices: Sequence[int] | None = None):
        self.indices = indices

    def choose(self, env, state, s_pre):
        return np.ones(env.cfg.num_users, int) if self.indices is None else np.asarray(self.indices)

    def decide(self, env, state, s):
        U, R, N = env.cfg.channel.shape
        return AllocationDecision(np.zeros((U, R), np.int8), np.zeros((U, R, N), complex), state.indices)


class FixedDecisionPolicy:
    """Replays a list of per-draw decisions, one per single-slot episode."""

    def __init__(self, decisions: Sequence[AllocationDecision]):
        self.decisions = list(decisions)
        self._k = -1

    def choose(self, env, state, s_pre):
        self._k += 1
        return self.decisions[self._k].indices

    def decide(self, env, state, s):
        return self.decisions[self._k]


def policy_episode(env: TokenComEnv, policy: Policy, h0: np.ndarray | None = None) -> tuple[EpisodeStats, list]:
    cfg = env.cfg
    state = env.reset(h0)
    s_pre = build_state_vector(state, cfg)
    idx = policy.choose(env, state, s_pre)
    if cfg.codec != "h265":
        state = env.apply_tokenizer_selection(state, idx)
    stats, decisions = EpisodeStats(), []
    while not state.done:
        s = build_state_vector(state, cfg)
        decision = policy.decide(env, state, s)
        state, out = env.step(state, decision)
        stats.add(out)
        decisions.append((decision, out))
    return stats, decisions


def evaluate(policy: Policy | Learner, cfg: EpisodeConfig, episodes: int, seed: int) -> TrainingLog:
    """Greedy evaluation on a fresh channel stream derived from ``seed``."""
    if isinstance(policy, Learner):
        policy = AgentPolicy(policy)
    env = TokenComEnv(cfg, np.random.default_rng(np.random.SeedSequence(seed).spawn(6)[5]))
    log = TrainingLog()
    start = time.perf_counter()
    for ep in range(1, episodes + 1):
        stats, decisions = policy_episode(env, policy)
        idx = decisions[0][0].indices if decisions and decisions[0][0].indices is not None else ()
        log.records.append(stats.record(ep, 0.0, 0.0, time.perf_counter() - start, idx))
    return log


def evaluate_on_draws(policy: Policy | Learner, cfg: EpisodeConfig,
                      draws: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, list]:
    """Single-slot episodes on the given channel draws.

    Returns per-draw utilities, rewards and the executed decisions.
    """
    if isinstance(policy, Learner):
        policy = AgentPolicy(policy)
    one_slot = _with_slots(cfg, 1)
    env = TokenComEnv(one_slot, np.random.default_rng(0))
    utils, rewards, executed = [], [], []
    for h in draws:
        _, decisions = policy_episode(env, policy, h0=h)
        decision, out = decisions[0]
        utils.append(out.utility)
        rewards.append(out.reward)
        executed.append(decision)
    return np.array(utils), np.array(rewards), executed


def _with_slots(cfg: EpisodeConfig, slots: int) -> EpisodeConfig:
    return replace(cfg, slots=slots)


def log_rows(log: TrainingLog, evaluations: bool = False) -> list[dict]:
    rows = log.evaluations if evaluations else log.records
    return [{f.name: getattr(r, f.name) for f in fields(EpisodeRecord)} for r in rows]
