"""DQN branch (tokenizer pairs + RB assignment) and DDPG branch (beamforming).

The Q-network has one shared trunk and a flat output laid out as
``[base | cell values (U*R) | tokenizer values]``. An assignment ``kappa`` is
valued as ``base + sum(kappa * cells)``; the tokenizer values are read only at
the first slot of an episode and regressed on the same TD target.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Callable

import numpy as np

from .errors import AgreementImpossible, BufferNotReady, ConfigurationError
from .nn import MLP, Adam, mlp_for


# ---------------------------------------------------------------- replay

@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    extras: dict = field(default_factory=dict)


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform sampling (with replacement)."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int,
                 extras: dict[str, int] | None = None):
        if capacity < 1:
            raise ConfigurationError("buffer capacity must be positive")
        self.capacity = capacity
        self.size = 0
        self._next = 0
        self.data = {
            "state": np.zeros((capacity, state_dim)),
            "action": np.zeros((capacity, action_dim)),
            "reward": np.zeros(capacity),
            "next_state": np.zeros((capacity, state_dim)),
            "done": np.zeros(capacity, bool),
        }
        for name, dim in (extras or {}).items():
            self.data[name] = np.zeros((capacity, dim))

    def __len__(self) -> int:
        return self.size

    def push(self, tr: Transition) -> None:
        k = self._next
        d = self.data
        d["state"][k] = tr.state
        d["action"][k] = tr.action
        d["reward"][k] = tr.reward
        d["next_state"][k] = tr.next_state
        d["done"][k] = tr.done
        for name, value in tr.extras.items():
            d[name][k] = value
        self._next = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if not self.ready(batch_size):
            raise BufferNotReady(f"{self.size} transitions stored, {batch_size} requested")
        return rng.integers(0, self.size, size=batch_size)

    def gather(self, idx: np.ndarray) -> dict[str, np.ndarray]:
        return {k: v[idx] for k, v in self.data.items()}

    def ready(self, batch_size: int) -> bool:
        return self.size >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return self.gather(self.sample_indices(batch_size, rng))

    def oldest(self) -> int:
        """Slot index of the oldest stored transition."""
        return self._next if self.size == self.capacity else 0


# ---------------------------------------------------------------- assignment decoding

@dataclass(frozen=True)
class RbLimits:
    rb_cap: int
    k_min: int
    k_max: int

    @classmethod
    def of(cls, cfg) -> "RbLimits":
        return cls(cfg.rb_cap, cfg.k_min, cfg.k_max)

    def check(self, num_users: int, num_rbs: int) -> None:
        if num_users * self.k_min > num_rbs * self.rb_cap:
            raise ConfigurationError(
                f"infeasible RB limits: U*K_min={num_users * self.k_min} > R*kappa={num_rbs * self.rb_cap}")


def greedy_decode(scores: np.ndarray, limits: RbLimits) -> np.ndarray:
    """Feasible assignment from per-cell scores, batched over a leading axis.

    Cells are visited in descending score; a positive-scored cell is switched
    on while its RB holds fewer than ``rb_cap`` users and its user fewer than
    ``K_max`` RBs. Users still below ``K_min`` then take their best remaining
    cells that fit.
    """
    if scores.ndim == 2:
        return _greedy_decode_one(scores, limits)
    s = scores
    B, U, R = s.shape
    limits.check(U, R)
    if limits.rb_cap >= U:
        # RB caps never bind, so each user independently keeps its best cells
        rank = np.argsort(np.argsort(-s, axis=2, kind="stable"), axis=2, kind="stable")
        keep = np.clip((s > 0).sum(axis=2), limits.k_min, limits.k_max)
        return (rank < keep[:, :, None]).astype(np.int8)
    flat = s.reshape(B, U * R)
    order = np.argsort(-flat, axis=1, kind="stable")
    kappa = np.zeros((B, U, R), dtype=np.int8)
    rows = np.arange(B)
    col_load = np.zeros((B, R), dtype=int)
    row_load = np.zeros((B, U), dtype=int)
    for k in range(U * R):
        cell = order[:, k]
        i, l = cell // R, cell % R
        ok = (flat[rows, cell] > 0) & (col_load[rows, l] < limits.rb_cap) & (row_load[rows, i] < limits.k_max)
        kappa[rows[ok], i[ok], l[ok]] = 1
        col_load[rows[ok], l[ok]] += 1
        row_load[rows[ok], i[ok]] += 1
    if limits.k_min > 0:
        for k in range(U * R):
            cell = order[:, k]
            i, l = cell // R, cell % R
            ok = ((kappa[rows, i, l] == 0) & (row_load[rows, i] < limits.k_min)
                  & (col_load[rows, l] < limits.rb_cap))
            kappa[rows[ok], i[ok], l[ok]] = 1
            col_load[rows[ok], l[ok]] += 1
            row_load[rows[ok], i[ok]] += 1
        if np.any(row_load < limits.k_min):
            kappa = _repair_k_min(kappa, row_load, col_load, flat, limits)
    return kappa


def _greedy_decode_one(scores: np.ndarray, limits: RbLimits) -> np.ndarray:
    U, R = scores.shape
    limits.check(U, R)
    flat = scores.ravel()
    order = np.argsort(-flat, kind="stable").tolist()
    kappa = np.zeros((U, R), dtype=np.int8)
    col = [0] * R
    row = [0] * U
    for cell in order:
        if not flat[cell] > 0:
            break
        i, l = divmod(cell, R)
        if col[l] < limits.rb_cap and row[i] < limits.k_max:
            kappa[i, l] = 1
            col[l] += 1
            row[i] += 1
    if limits.k_min > 0 and min(row) < limits.k_min:
        for cell in order:
            i, l = divmod(cell, R)
            if not kappa[i, l] and row[i] < limits.k_min and col[l] < limits.rb_cap:
                kappa[i, l] = 1
                col[l] += 1
                row[i] += 1
        if min(row) < limits.k_min:
            kappa = _repair_k_min(kappa[None], np.array([row]), np.array([col]), flat[None], limits)[0]
    return kappa


def _repair_k_min(kappa, row_load, col_load, flat, limits):
    # a greedy pass can strand a user behind full RBs; shift cells along augmenting paths
    B, U, R = kappa.shape
    for b in range(B):
        scores = flat[b].reshape(U, R)
        for i in range(U):
            while row_load[b, i] < limits.k_min:
                if not _augment(kappa[b], row_load[b], col_load[b], scores, i, limits):
                    raise ConfigurationError("could not satisfy K_min")
    return kappa


def _augment(kappa, row_load, col_load, scores, start, limits) -> bool:
    """Give ``start`` one more RB via a chain of hand-overs (breadth-first).

    Along the chain each user takes an RB from the next one; the chain ends at
    an RB with spare capacity or at a user holding more than ``K_min`` RBs.
    Loads of intermediate users are unchanged.
    """
    U, R = kappa.shape
    parent = {start: None}      # user -> (previous user, RB taken from this user)
    queue = [start]
    while queue:
        u = queue.pop(0)
        for l in np.argsort(-scores[u], kind="stable"):
            if kappa[u, l]:
                continue
            if col_load[l] < limits.rb_cap:
                _apply_chain(kappa, parent, u, l)
                col_load[l] += 1
                row_load[start] += 1
                return True
            for j in np.argsort(scores[:, l], kind="stable"):
                if not kappa[j, l] or j in parent:
                    continue
                parent[j] = (u, l)
                if j != start and row_load[j] > limits.k_min:
                    kappa[j, l] = 0
                    row_load[j] -= 1
                    _apply_chain(kappa, parent, u, l)
                    row_load[start] += 1
                    return True
                queue.append(j)
    return False


def _apply_chain(kappa, parent, user, rb) -> None:
    # ``user`` gains ``rb``; walk back, each predecessor gaining the RB its successor gives up
    kappa[user, rb] = 1
    while parent[user] is not None:
        prev, taken = parent[user]
        kappa[user, taken] = 0
        kappa[prev, taken] = 1
        user = prev


def assignment_value(kappa: np.ndarray, scores: np.ndarray) -> np.ndarray:
    return (kappa * scores).sum(axis=(-2, -1))


def is_feasible_assignment(kappa: np.ndarray, limits: RbLimits) -> bool:
    kappa = np.asarray(kappa)
    if np.any((kappa != 0) & (kappa != 1)):
        return False
    rows = kappa.sum(axis=1)
    return bool(np.all(kappa.sum(axis=0) <= limits.rb_cap)
                and np.all(rows >= limits.k_min) and np.all(rows <= limits.k_max))


def random_feasible_assignment(num_users: int, num_rbs: int, limits: RbLimits,
                               rng: np.random.Generator, max_tries: int = 1000) -> np.ndarray:
    """Uniform draw from the feasible assignment set.

    Each RB column is drawn uniformly among user subsets of size <= rb_cap;
    draws violating the per-user range are rejected, which keeps the result
    uniform over the feasible set.
    """
    limits.check(num_users, num_rbs)
    weights = np.array([comb(num_users, k) for k in range(limits.rb_cap + 1)], float)
    cdf = np.cumsum(weights / weights.sum())
    unconstrained = limits.k_min == 0 and limits.k_max >= num_rbs
    for _ in range(max_tries):
        ks = np.minimum(np.searchsorted(cdf, rng.random(num_rbs), side="right"), limits.rb_cap)
        # a uniformly random size-k subset per column: the k smallest of i.i.d. uniforms
        rank = np.argsort(np.argsort(rng.random((num_users, num_rbs)), axis=0), axis=0)
        kappa = (rank < ks[None, :]).astype(np.int8)
        if unconstrained or is_feasible_assignment(kappa, limits):
            return kappa
    return greedy_decode(rng.uniform(-1.0, 1.0, (num_users, num_rbs)), limits)


# ---------------------------------------------------------------- DQN

TOKENIZER_MODES = ("per_user", "shared", "none")


class DqnAgent:
    def __init__(self, state_dim: int, num_users: int, num_rbs: int, max_pairs: int,
                 rng: np.random.Generator, tok_mode: str = "per_user", hidden=(256, 256),
                 lr: float = 1e-3, gamma: float = 0.98, tau: float = 0.005,
                 eps_start: float = 1.0, eps_end: float = 0.05, eps_decay: float = 0.995):
        if tok_mode not in TOKENIZER_MODES:
            raise ConfigurationError(f"unknown tokenizer head mode {tok_mode!r}")
        self.U, self.R, self.M = num_users, num_rbs, max_pairs
        self.tok_mode = tok_mode
        self.tok_size = {"per_user": num_users * max_pairs, "shared": max_pairs, "none": 0}[tok_mode]
        out = 1 + num_users * num_rbs + self.tok_size
        self.q = mlp_for(state_dim, hidden, out, "identity", rng)
        self.q_target = self.q.copy()
        self.opt = Adam(self.q.num_params, lr)
        self.gamma, self.tau = gamma, tau
        self.eps, self.eps_end, self.eps_decay = eps_start, eps_end, eps_decay

    # layout helpers
    def split(self, out: np.ndarray):
        UR = self.U * self.R
        return out[:, 0], out[:, 1:1 + UR].reshape(-1, self.U, self.R), out[:, 1 + UR:]

    def tokenizer_values(self, s: np.ndarray) -> np.ndarray:
        _, _, tok = self.split(self.q(s))
        return tok[0].reshape(self.U, self.M) if self.tok_mode == "per_user" else tok[0]

    def cell_values(self, s: np.ndarray) -> np.ndarray:
        return self.split(self.q(s))[1][0]

    def select_tokenizers(self, s: np.ndarray, pair_counts, rng: np.random.Generator,
                          explore: bool = True) -> np.ndarray:
        """1-based pair index per user, epsilon-greedy; ties go to the lowest index."""
        counts = np.asarray(pair_counts, int)
        if np.any(counts < 1):
            raise AgreementImpossible("a user has no compatible pair")
        if self.tok_mode == "none":
            return np.ones(self.U, int)
        if self.tok_mode == "shared":
            limit = int(counts.min())
            if explore and rng.random() < self.eps:
                return np.full(self.U, rng.integers(1, limit + 1))
            vals = self.tokenizer_values(s)[:limit]
            return np.full(self.U, int(np.argmax(vals)) + 1)
        if explore and rng.random() < self.eps:
            return np.array([rng.integers(1, c + 1) for c in counts])
        return masked_argmax(self.tokenizer_values(s), counts)

    def select_allocation(self, s: np.ndarray, limits: RbLimits, rng: np.random.Generator,
                          explore: bool = True) -> np.ndarray:
        if explore and rng.random() < self.eps:
            return random_feasible_assignment(self.U, self.R, limits, rng)
        return greedy_decode(self.cell_values(s), limits)

    def greedy_next(self, next_states: np.ndarray, limits: RbLimits, net: MLP | None = None):
        """Greedy assignment and its value under ``net`` (the target by default)."""
        base, cells, _ = self.split((net or self.q_target)(next_states))
        kappa = greedy_decode(cells, limits)
        return kappa, base + assignment_value(kappa, cells)

    def td_target(self, batch: dict, limits: RbLimits, next_best: np.ndarray | None = None) -> np.ndarray:
        """``r + gamma * max_a' Q'(s', a')``, or just ``r`` on terminal transitions."""
        best = self.greedy_next(batch["next_state"], limits)[1] if next_best is None else next_best
        return batch["reward"] + self.gamma * np.where(batch["done"], 0.0, best)

    def predicted(self, out: np.ndarray, kappa: np.ndarray) -> np.ndarray:
        base, cells, _ = self.split(out)
        return base + assignment_value(kappa, cells)

    def td_update(self, batch: dict, limits: RbLimits, next_best: np.ndarray | None = None) -> float:
        """One Adam step on the squared TD error; returns the batch loss.

        ``next_best`` may carry precomputed target values ``max_a' Q'(s', a')``.
        """
        loss, grad = self.td_loss(batch, self.td_target(batch, limits, next_best))
        self.opt.step(self.q.params, grad)
        return loss

    def td_loss(self, batch: dict, target: np.ndarray) -> tuple[float, np.ndarray]:
        """Squared TD error against fixed ``target`` and its gradient w.r.t. the Q parameters."""
        B = target.shape[0]
        kappa = batch["action"].reshape(B, self.U, self.R)
        out, cache = self.q.forward(batch["state"])
        diff = self.predicted(out, kappa) - target
        loss = float(np.mean(diff ** 2))
        g = np.zeros_like(out)
        coef = 2.0 * diff / B
        g[:, 0] = coef
        g[:, 1:1 + self.U * self.R] = coef[:, None] * kappa.reshape(B, -1)
        grad, _ = self.q.backward(cache, g, need_input_grad=False)

        if self.tok_size and "has_tok" in batch:
            rows = np.flatnonzero(batch["has_tok"][:, 0] > 0.5)
            if rows.size:
                tok_loss, tok_grad = self._tokenizer_loss(batch, rows, target, B)
                loss += tok_loss
                grad += tok_grad
        return loss, grad

    def _tokenizer_loss(self, batch, rows, target, B):
        out, cache = self.q.forward(batch["pre_state"][rows])
        _, _, tok = self.split(out)
        idx = batch["indices"][rows].astype(int) - 1
        n = rows.size
        g = np.zeros_like(out)
        start = 1 + self.U * self.R
        if self.tok_mode == "per_user":
            cols = np.arange(self.U) * self.M + idx
            picked = np.take_along_axis(tok, cols, axis=1)
            diff = picked - target[rows][:, None]
            np.put_along_axis(g[:, start:], cols, 2.0 * diff / (B * self.U), axis=1)
            loss = float(np.sum(diff ** 2) / (B * self.U))
        else:
            col = idx[:, 0]
            diff = tok[np.arange(n), col] - target[rows]
            g[np.arange(n), start + col] = 2.0 * diff / B
            loss = float(np.sum(diff ** 2) / B)
        grad, _ = self.q.backward(cache, g, need_input_grad=False)
        return loss, grad

    def soft_update(self) -> None:
        self.q_target.soft_update(self.q, self.tau)

    def decay_epsilon(self) -> None:
        self.eps = max(self.eps_end, self.eps * self.eps_decay)


def masked_argmax(values: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Per-row argmax over the first ``counts[i]`` entries, returned 1-based."""
    vals = np.array(values, float)
    cols = np.arange(vals.shape[1])[None, :]
    vals[cols >= np.asarray(counts)[:, None]] = -np.inf
    return np.argmax(vals, axis=1) + 1


# ---------------------------------------------------------------- DDPG

class DdpgAgent:
    """Deterministic actor with tanh outputs and a Q(s, a) critic.

    The critic sees the action after the environment-side transform, which is
    an element-wise scaling ``a = raw * mult`` (masking and per-cell power
    normalisation); ``mult`` is stored with every transition.
    """

    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator, hidden=(256, 256),
                 lr_actor: float = 1e-4, lr_critic: float = 1e-3, gamma: float = 0.98, tau: float = 0.005,
                 noise_start: float = 0.2, noise_end: float = 0.02, noise_decay: float = 0.995,
                 noise_kind: str = "gaussian", ou_theta: float = 0.15):
        if noise_kind not in ("gaussian", "ou"):
            raise ConfigurationError(f"unknown exploration noise {noise_kind!r}")
        self.state_dim, self.action_dim = state_dim, action_dim
        self.actor = mlp_for(state_dim, hidden, action_dim, "tanh", rng)
        self.critic = mlp_for(state_dim + action_dim, hidden, 1, "identity", rng)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.num_params, lr_actor)
        self.critic_opt = Adam(self.critic.num_params, lr_critic)
        self.gamma, self.tau = gamma, tau
        self.sigma, self.noise_end, self.noise_decay = noise_start, noise_end, noise_decay
        self.noise_kind, self.ou_theta = noise_kind, ou_theta
        self._ou = np.zeros(action_dim)

    def act(self, s: np.ndarray, rng: np.random.Generator, explore: bool = True) -> np.ndarray:
        raw = self.actor(s)[0]
        if explore and self.sigma > 0:
            if self.noise_kind == "ou":
                self._ou += -self.ou_theta * self._ou + self.sigma * rng.standard_normal(self.action_dim)
                noise = self._ou
            else:
                noise = self.sigma * rng.standard_normal(self.action_dim)
            raw = np.clip(raw + noise, -1.0, 1.0)
        return raw

    def critic_update(self, batch: dict, next_mult: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> float:
        """Squared Bellman error step; ``next_mult(next_states, next_raw)`` gives
        the action transform at the next state."""
        loss, grad = self.critic_loss(batch, self.critic_target_values(batch, next_mult))
        self.critic_opt.step(self.critic.params, grad)
        return loss

    def critic_target_values(self, batch: dict, next_mult) -> np.ndarray:
        s2 = batch["next_state"]
        raw2 = self.actor_target(s2)
        a2 = raw2 * next_mult(s2, raw2)
        q2 = self.critic_target(np.hstack([s2, a2]))[:, 0]
        return batch["reward"] + self.gamma * np.where(batch["done"], 0.0, q2)

    def critic_loss(self, batch: dict, target: np.ndarray) -> tuple[float, np.ndarray]:
        q, cache = self.critic.forward(np.hstack([batch["state"], batch["action"]]))
        diff = q[:, 0] - target
        B = diff.shape[0]
        grad, _ = self.critic.backward(cache, (2.0 * diff / B)[:, None], need_input_grad=False)
        return float(np.mean(diff ** 2)), grad

    def actor_gradient(self, states: np.ndarray, mult: np.ndarray) -> tuple[float, np.ndarray]:
        """Objective ``-mean Q(s, pi(s))`` and its gradient w.r.t. the actor parameters."""
        raw, cache_a = self.actor.forward(states)
        q, cache_c = self.critic.forward(np.hstack([states, raw * mult]))
        B = states.shape[0]
        _, g_in = self.critic.backward(cache_c, np.full((B, 1), -1.0 / B))
        g_raw = g_in[:, self.state_dim:] * mult
        grad, _ = self.actor.backward(cache_a, g_raw, need_input_grad=False)
        return -float(np.mean(q)), grad

    def actor_update(self, batch: dict) -> float:
        objective, grad = self.actor_gradient(batch["state"], batch["mult"])
        self.actor_opt.step(self.actor.params, grad)
        return objective

    def soft_update(self) -> None:
        self.actor_target.soft_update(self.actor, self.tau)
        self.critic_target.soft_update(self.critic, self.tau)

    def decay_noise(self) -> None:
        self.sigma = max(self.noise_end, self.sigma * self.noise_decay)
        self._ou[:] = 0.0


def polyak_update(target: MLP, online: MLP, tau: float) -> None:
    target.soft_update(online, tau)


def decay_epsilon(agent: DqnAgent) -> None:
    agent.decay_epsilon()


# ---------------------------------------------------------------- beamforming map

def beam_multiplier(kappa: np.ndarray, num_antennas: int) -> np.ndarray:
    """Element-wise map from raw actor outputs to the normalised beamformer
    ``mask / sqrt(A)`` laid out ``(2, U, R, N)`` and flattened."""
    kappa = np.asarray(kappa)
    single = kappa.ndim == 2
    k = kappa[None] if single else kappa
    active = k.reshape(k.shape[0], -1).sum(axis=1)
    scale = np.where(active > 0, 1.0 / np.sqrt(np.maximum(active, 1)), 0.0)
    m = np.broadcast_to(k[:, None, :, :, None] * scale[:, None, None, None, None],
                        (k.shape[0], 2, *k.shape[1:], num_antennas))
    m = m.reshape(k.shape[0], -1).astype(float)
    return m[0] if single else m


def beamformer_from_raw(raw: np.ndarray, kappa: np.ndarray, bs_power: float) -> np.ndarray:
    """Masked, power-scaled complex beamformers ``(U, R, N)`` from raw outputs in [-1, 1].

    Each active cell is scaled so its power cannot exceed ``P_BS / A``; the
    result is then projected onto the total budget if it still exceeds it.
    """
    kappa = np.asarray(kappa)
    U, R = kappa.shape
    N = raw.size // (2 * U * R)
    r = raw.reshape(2, U, R, N) * kappa[None, :, :, None]
    A = int(kappa.sum())
    if A == 0:
        return np.zeros((U, R, N), complex)
    w = (r[0] + 1j * r[1]) * np.sqrt(bs_power / (A * 2 * N))
    total = float((w.real ** 2 + w.imag ** 2).sum())
    if total > bs_power:
        w *= np.sqrt(bs_power / total)
    return w


def ddpg_act(agent: DdpgAgent, s: np.ndarray, explore: bool, rng: np.random.Generator,
             kappa: np.ndarray, bs_power: float) -> np.ndarray:
    raw = agent.act(s, rng, explore)
    U, R = np.asarray(kappa).shape
    return beamformer_from_raw(raw[: raw.size - raw.size % (2 * U * R)], kappa, bs_power)
