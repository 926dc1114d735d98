"""Slot-level constrained MDP for joint tokenizer agreement, RB assignment and
beamforming.

The environment is driven functionally: ``reset`` returns an :class:`EnvState`,
``apply_tokenizer_selection`` fixes the per-user pair for the episode, and
``step`` consumes an :class:`AllocationDecision` and returns the next state
together with a :class:`SlotOutcome`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import channel as chan
from .errors import ConfigurationError, EpisodeFinished
from .tokenizers import (
    CodecLadder, CompatiblePairSet, TokenizerSpec, VideoParams, compatible_pairs,
    compression_rate, h265_ladder, quality_of, required_bitrate,
)

FLAG_NAMES = ("power", "rb_cap", "bitrate", "quality", "rb_range", "min_rate", "pair_index", "binary")


class ViolationFlags(NamedTuple):
    power: bool = False
    rb_cap: bool = False
    bitrate: bool = False
    quality: bool = False
    rb_range: bool = False
    min_rate: bool = False
    pair_index: bool = False
    binary: bool = False

    @property
    def count(self) -> int:
        return int(sum(self))


@dataclass(frozen=True)
class EpisodeConfig:
    channel: chan.ChannelConfig
    videos: tuple[VideoParams, ...]
    pair_sets: tuple[CompatiblePairSet, ...]
    alpha: float = 2.0
    beta: float = 1.0
    penalty: float = 2.0
    q_min: float = 18.0
    q_max: float = 36.0
    r_min: float = 1e6
    rb_cap: int = 2
    k_min: int = 0
    k_max: int = 8
    slots: int = 100
    metric: str = "psnr"
    fading: str = "slot"
    codec: str = "token"
    ladder: CodecLadder = field(default_factory=h265_ladder)

    def __post_init__(self):
        U, R = self.channel.num_users, self.channel.num_rbs
        if len(self.videos) != U or len(self.pair_sets) != U:
            raise ConfigurationError("need one video and one pair set per user")
        if not self.q_max > self.q_min:
            raise ConfigurationError("q_max must exceed q_min")
        if not (self.alpha > 0 and self.beta > 0):
            raise ConfigurationError("alpha and beta must be positive")
        if self.penalty < 0:
            raise ConfigurationError("penalty must be non-negative")
        if not 0 <= self.k_min <= self.k_max <= R:
            raise ConfigurationError("need 0 <= K_min <= K_max <= R")
        if not 1 <= self.rb_cap <= U:
            raise ConfigurationError(f"per-RB user cap must lie in [1, U={U}]")
        if self.slots < 1:
            raise ConfigurationError("slots per episode must be >= 1")
        if self.fading not in ("slot", "episode"):
            raise ConfigurationError(f"unknown fading mode {self.fading!r}")
        if self.codec not in ("token", "h265"):
            raise ConfigurationError(f"unknown codec {self.codec!r}")
        if self.codec == "h265" and self.metric != "psnr":
            raise ConfigurationError("the H.265 ladder only carries PSNR")
        if U * self.k_min > R * self.rb_cap:
            raise ConfigurationError("K_min unreachable: U*K_min exceeds R*kappa")

    @classmethod
    def build(cls, channel: chan.ChannelConfig, video: VideoParams | Sequence[VideoParams],
              catalog: Sequence[TokenizerSpec], capabilities: Sequence[Sequence[str]] | None = None,
              **kwargs) -> "EpisodeConfig":
        U = channel.num_users
        videos = (video,) * U if isinstance(video, VideoParams) else tuple(video)
        if capabilities is None:
            capabilities = [[s.name_tag for s in catalog]] * U
        pair_sets = tuple(compatible_pairs(catalog, caps, i) for i, caps in enumerate(capabilities))
        return cls(channel=channel, videos=videos, pair_sets=pair_sets, **kwargs)

    @property
    def num_users(self) -> int:
        return self.channel.num_users

    @property
    def num_rbs(self) -> int:
        return self.channel.num_rbs

    @property
    def max_pairs(self) -> int:
        return max(len(p) for p in self.pair_sets)

    @property
    def pair_counts(self) -> np.ndarray:
        return np.array([len(p) for p in self.pair_sets])

    @property
    def eta_max(self) -> float:
        if self.codec == "h265":
            return max(self.ladder.bpp)
        return max(compression_rate(s) for p in self.pair_sets for s in p.pairs)

    @property
    def state_dim(self) -> int:
        U, R, N = self.channel.shape
        return 2 * U * R * N + U * R + 2 * U


@dataclass(frozen=True)
class EnvState:
    t: int
    h: np.ndarray
    prev_powers: np.ndarray
    prev_rates: np.ndarray
    eta: np.ndarray
    indices: np.ndarray | None = None
    required: np.ndarray | None = None
    slots: int = 100

    @property
    def done(self) -> bool:
        return self.t > self.slots

    @property
    def selected(self) -> bool:
        return self.required is not None


@dataclass(frozen=True)
class AllocationDecision:
    kappa: np.ndarray
    w: np.ndarray
    indices: np.ndarray | None = None


@dataclass(frozen=True)
class SlotOutcome:
    sinr: np.ndarray
    rb_rates: np.ndarray
    user_rates: np.ndarray
    user_powers: np.ndarray
    total_power: float
    required: np.ndarray
    quality: np.ndarray
    quality_norm: np.ndarray
    psnr: np.ndarray
    utility: float
    reward: float
    flags: ViolationFlags
    frozen: np.ndarray


def normalize_quality(q, q_min: float, q_max: float):
    """Linear map of ``[q_min, q_max]`` onto ``[0, 1]``, clamped."""
    if not q_max > q_min:
        raise ConfigurationError("q_max must exceed q_min")
    return np.clip((np.asarray(q, float) - q_min) / (q_max - q_min), 0.0, 1.0)


def utility(q_norm, powers, alpha: float, beta: float, bs_power: float) -> float:
    q_norm = np.asarray(q_norm, float)
    powers = np.asarray(powers, float)
    return float(np.mean(alpha * q_norm - beta * powers / bs_power))


def is_frozen(rate, required):
    """A user freezes in a slot when its rate falls strictly below the bitrate its pair needs."""
    return np.asarray(rate) < np.asarray(required)


def check_constraints(decision: AllocationDecision, total_power: float, user_rates, required,
                      quality, cfg: EpisodeConfig) -> ViolationFlags:
    """Evaluate the eight constraints; each flag is raised if any user violates it."""
    kappa = np.asarray(decision.kappa)
    user_rates = np.asarray(user_rates, float)
    binary = bool(np.any((kappa != 0) & (kappa != 1)))
    if decision.indices is None:
        bad_index = False
    else:
        idx = np.asarray(decision.indices)
        bad_index = bool(np.any((idx < 1) | (idx > cfg.pair_counts)))
    rb_load = kappa.sum(axis=0)
    user_load = kappa.sum(axis=1)
    return ViolationFlags(
        power=bool(total_power > cfg.channel.bs_power * (1.0 + 1e-9)),
        rb_cap=bool(np.any(rb_load > cfg.rb_cap)),
        bitrate=bool(np.any(is_frozen(user_rates, required))),
        quality=bool(np.any(np.asarray(quality) < cfg.q_min)),
        rb_range=bool(np.any((user_load < cfg.k_min) | (user_load > cfg.k_max))),
        min_rate=bool(np.any(user_rates < cfg.r_min)),
        pair_index=bad_index,
        binary=binary,
    )


def reward_from(util: float, flags: ViolationFlags, penalty: float) -> float:
    return util - penalty * flags.count


class TokenComEnv:
    """Downlink TokenCom environment with its own channel random stream."""

    def __init__(self, cfg: EpisodeConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self._episode_h = None

    def _draw(self) -> np.ndarray:
        return chan.sample_channels(self.cfg.channel, self.rng)

    def reset(self, h: np.ndarray | None = None) -> EnvState:
        cfg = self.cfg
        U, R = cfg.num_users, cfg.num_rbs
        h = self._draw() if h is None else h
        self._episode_h = h
        eta = np.zeros(U)
        required = None
        if cfg.codec == "h265":
            eta = np.full(U, cfg.ladder.bpp[0])
            required = np.array([required_bitrate(cfg.ladder.bpp[0], v) for v in cfg.videos])
        return EnvState(t=1, h=h, prev_powers=np.zeros((U, R)), prev_rates=np.zeros(U),
                        eta=eta, required=required, slots=cfg.slots)

    def apply_tokenizer_selection(self, state: EnvState, indices) -> EnvState:
        cfg = self.cfg
        if cfg.codec == "h265":
            raise ConfigurationError("the H.265 baseline has no tokenizer selection")
        if state.selected or state.t != 1:
            raise ConfigurationError("tokenizer pairs are fixed for the whole episode")
        idx = np.asarray(indices, int).reshape(-1)
        if idx.shape != (cfg.num_users,) or np.any((idx < 1) | (idx > cfg.pair_counts)):
            raise ConfigurationError(f"pair indices {idx.tolist()} outside 1..{cfg.pair_counts.tolist()}")
        specs = [ps[i] for ps, i in zip(cfg.pair_sets, idx)]
        eta = np.array([compression_rate(s) for s in specs])
        required = np.array([required_bitrate(e, v) for e, v in zip(eta, cfg.videos)])
        return replace(state, eta=eta, indices=idx, required=required)

    def selected_specs(self, state: EnvState) -> list[TokenizerSpec]:
        return [ps[i] for ps, i in zip(self.cfg.pair_sets, state.indices)]

    def evaluate(self, state: EnvState, decision: AllocationDecision) -> SlotOutcome:
        """Outcome of applying ``decision`` in ``state`` without advancing time."""
        cfg = self.cfg
        ch = cfg.channel
        kappa = np.asarray(decision.kappa)
        sinr = chan.compute_sinr(state.h, kappa, decision.w, ch)
        rb_rates, user_rates = chan.compute_rates(sinr, kappa, ch.rb_bandwidth)
        user_powers, total_power = chan.compute_powers(decision.w, kappa)
        if cfg.codec == "h265":
            levels = [cfg.ladder.select(r, v)[0] for r, v in zip(user_rates, cfg.videos)]
            required = np.array([required_bitrate(cfg.ladder.bpp[k], v) for k, v in zip(levels, cfg.videos)])
            psnr = np.array([cfg.ladder.psnr[k] for k in levels])
            quality = psnr
            indices = None
        else:
            specs = self.selected_specs(state)
            required = state.required
            psnr = np.array([s.psnr for s in specs])
            quality = np.array([quality_of(s, cfg.metric) for s in specs])
            indices = decision.indices if decision.indices is not None else state.indices
        q_norm = normalize_quality(quality, cfg.q_min, cfg.q_max)
        util = utility(q_norm, user_powers, cfg.alpha, cfg.beta, ch.bs_power)
        flags = check_constraints(AllocationDecision(kappa, decision.w, indices), total_power,
                                  user_rates, required, quality, cfg)
        return SlotOutcome(
            sinr=sinr, rb_rates=rb_rates, user_rates=user_rates, user_powers=user_powers,
            total_power=total_power, required=required, quality=quality, quality_norm=q_norm,
            psnr=psnr, utility=util, reward=reward_from(util, flags, cfg.penalty), flags=flags,
            frozen=is_frozen(user_rates, required),
        )

    def step(self, state: EnvState, decision: AllocationDecision,
             next_h: np.ndarray | None = None) -> tuple[EnvState, SlotOutcome]:
        if state.done:
            raise EpisodeFinished(f"episode already ran its {state.slots} slots")
        if not state.selected:
            raise ConfigurationError("apply a tokenizer selection before stepping")
        out = self.evaluate(state, decision)
        if next_h is None:
            next_h = self._episode_h if self.cfg.fading == "episode" else self._draw()
        eta = state.eta
        if self.cfg.codec == "h265":
            eta = out.required / np.array([v.pixel_rate for v in self.cfg.videos])
        nxt = replace(state, t=state.t + 1, h=next_h, prev_powers=chan.cell_powers(decision.w),
                      prev_rates=out.user_rates, eta=eta,
                      required=out.required if self.cfg.codec == "h265" else state.required)
        return nxt, out


def build_state_vector(state: EnvState, cfg: EpisodeConfig) -> np.ndarray:
    """Flat observation: scaled channel (re, im), powers / P_BS, rates / required, eta / eta_max."""
    h = state.h / np.sqrt(cfg.channel.channel_variance)
    if state.required is None:
        rate_feat = np.zeros(cfg.num_users)
    else:
        req = state.required
        rate_feat = np.divide(state.prev_rates, req, out=np.zeros(cfg.num_users), where=req > 0)
    return np.concatenate([
        h.real.ravel(), h.imag.ravel(),
        (state.prev_powers / cfg.channel.bs_power).ravel(),
        rate_feat,
        state.eta / cfg.eta_max,
    ])
