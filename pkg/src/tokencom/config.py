"""Plain-text ``key=value`` experiment configuration.

Every key is a field of :class:`ExperimentConfig`; defaults are the reference
system parameters. Powers are given in dBm and converted to watts through
properties so that a dumped file re-reads to an equal config.
"""

from __future__ import annotations

import os
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .channel import ChannelConfig, calibrate_channel_variance, dbm_to_watt
from .env import EpisodeConfig
from .errors import ConfigurationError
from .tokenizers import RESOLUTIONS, TokenizerSpec, VideoParams, load_catalog, required_bitrate
from .training import AgentSettings, BaselineKind

SEED_ENV = "TOKENCOM_SEED"
PRESETS = ("freezing-vs-episode", "freezing-vs-resolution", "psnr-vs-users", "psnr-vs-power")

# overrides applied by presets unless full_scale is set or the key was given explicitly
DESK_SCALE = {
    "N": 4, "R": 4, "U": 2, "K_max": 2, "episodes": 200, "hidden": (64, 64),
    "batch_size": 64, "buffer_size": 20_000,
    # 200 episodes: reach the exploration floor by about episode 100, shorter horizon
    "eps_decay": 0.97, "gamma": 0.9,
}


@dataclass(frozen=True)
class ExperimentConfig:
    # system
    N: int = 32
    R: int = 16
    U: int = 4
    B: float = 30e3
    P_BS_dBm: float = 30.0
    noise_psd_dBm_Hz: float = -174.0
    kappa: int = 2
    R_min: float = 1e6
    q_min: float = 18.0
    q_max: float = 36.0
    K_min: int = 0
    K_max: int = 8
    H: int = 1080
    W: int = 1920
    rho: float = 24.0
    lambda_pen: float = 2.0
    alpha: float = 2.0
    beta: float = 1.0
    metric: str = "psnr"
    fading: str = "slot"
    # channel variance; 0 means calibrate so one user reaches
    # calibration_factor times the largest catalog bitrate at 1080p
    channel_variance: float = 0.0
    calibration_factor: float = 2.0
    user_gain_dB: tuple[float, ...] = ()
    catalog: str = ""
    # learning
    episodes: int = 500
    steps: int = 100
    batch_size: int = 256
    buffer_size: int = 100_000
    gamma: float = 0.98
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay: float = 0.995
    tau: float = 0.005
    hidden: tuple[int, ...] = (256, 256)
    lr_q: float = 1e-3
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    noise_start: float = 0.2
    noise_end: float = 0.02
    noise_decay: float = 0.995
    noise_kind: str = "gaussian"
    # experiment
    baseline: str = "hybrid"
    baselines: tuple[str, ...] = ("hybrid", "ddpg-ta", "agnostic-ta", "fixed-ta", "conventional-h265")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    preset: str = "freezing-vs-episode"
    sweep: tuple[float, ...] = ()
    sweep_users: tuple[int, ...] = ()
    eval_episodes: int = 10
    full_scale: bool = False
    out: str = "runs"
    explicit: frozenset = field(default=frozenset(), compare=False, repr=False)

    def __post_init__(self):
        for name in ("N", "R", "U", "kappa", "H", "W", "episodes", "steps", "batch_size", "buffer_size",
                     "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("B", "rho", "alpha", "beta", "calibration_factor"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.kappa > self.U:
            raise ConfigurationError(f"kappa={self.kappa} exceeds U={self.U}")
        if not 0 <= self.K_min <= self.K_max <= self.R:
            raise ConfigurationError("need 0 <= K_min <= K_max <= R")
        if not self.q_max > self.q_min:
            raise ConfigurationError("q_max must exceed q_min")
        if self.channel_variance < 0:
            raise ConfigurationError("channel_variance must be >= 0 (0 = calibrate)")
        if not self.seeds:
            raise ConfigurationError("seed list must not be empty")
        if any(v <= 0 for v in self.sweep) or any(u < 1 for u in self.sweep_users):
            raise ConfigurationError("sweep values must be positive")
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}; choose from {list(PRESETS)}")
        if self.user_gain_dB and len(self.user_gain_dB) != self.U:
            raise ConfigurationError("user_gain_dB needs one entry per user")
        BaselineKind.parse(self.baseline)
        for b in self.baselines:
            BaselineKind.parse(b)
        AgentSettings(**self._agent_kwargs())

    # -- derived quantities
    @property
    def bs_power(self) -> float:
        return dbm_to_watt(self.P_BS_dBm)

    @property
    def noise_psd(self) -> float:
        return dbm_to_watt(self.noise_psd_dBm_Hz)

    @property
    def kind(self) -> BaselineKind:
        return BaselineKind.parse(self.baseline)

    @property
    def kinds(self) -> list[BaselineKind]:
        return [BaselineKind.parse(b) for b in self.baselines]

    @property
    def video(self) -> VideoParams:
        return VideoParams(height=self.H, width=self.W, fps=self.rho)

    def load_catalog(self) -> list[TokenizerSpec]:
        return load_catalog(self.catalog or None)

    def _agent_kwargs(self) -> dict:
        return dict(hidden=tuple(self.hidden), lr_q=self.lr_q, lr_actor=self.lr_actor, lr_critic=self.lr_critic,
                    gamma=self.gamma, tau=self.tau, eps_start=self.eps_start, eps_end=self.eps_end,
                    eps_decay=self.eps_decay, noise_start=self.noise_start, noise_end=self.noise_end,
                    noise_decay=self.noise_decay, noise_kind=self.noise_kind, batch_size=self.batch_size,
                    buffer_size=self.buffer_size, episodes=self.episodes)

    def agent_settings(self) -> AgentSettings:
        return AgentSettings(**self._agent_kwargs())

    def channel_config(self, calibrate_with: "ExperimentConfig | None" = None) -> ChannelConfig:
        """Channel parameters; a zero variance is calibrated against ``calibrate_with``
        (defaults to this config), so sweeps can share one calibration."""
        base = ChannelConfig(num_antennas=self.N, num_users=self.U, num_rbs=self.R, rb_bandwidth=self.B,
                             noise_psd=self.noise_psd, bs_power=self.bs_power,
                             user_gain_db=tuple(self.user_gain_dB))
        variance = self.channel_variance
        if variance == 0:
            ref = calibrate_with or self
            target = ref.calibration_factor * self.calibration_rate(ref)
            ref_ch = replace(base, num_antennas=ref.N, num_rbs=ref.R, rb_bandwidth=ref.B, bs_power=ref.bs_power)
            variance = calibrate_channel_variance(ref_ch, target)
        return replace(base, channel_variance=variance)

    @staticmethod
    def calibration_rate(cfg: "ExperimentConfig") -> float:
        eta = max(s.eta for s in cfg.load_catalog())
        ref = RESOLUTIONS["1080p"]
        return required_bitrate(eta, VideoParams(ref.height, ref.width, fps=cfg.rho))

    def episode_config(self, codec: str | None = None, calibrate_with: "ExperimentConfig | None" = None,
                       kind: BaselineKind | None = None) -> EpisodeConfig:
        kind = kind or self.kind
        codec = codec or ("h265" if kind is BaselineKind.CONVENTIONAL_H265 else "token")
        return EpisodeConfig.build(
            self.channel_config(calibrate_with), self.video, self.load_catalog(),
            alpha=self.alpha, beta=self.beta, penalty=self.lambda_pen, q_min=self.q_min, q_max=self.q_max,
            r_min=self.R_min, rb_cap=self.kappa, k_min=self.K_min, k_max=self.K_max, slots=self.steps,
            metric=self.metric, fading=self.fading, codec=codec)

    def desk_scaled(self) -> "ExperimentConfig":
        """Apply the desk-scale dimensions to keys not set explicitly."""
        if self.full_scale:
            return self
        changes = {k: v for k, v in DESK_SCALE.items() if k not in self.explicit}
        if "K_max" in changes:
            changes["K_max"] = min(self.K_max, changes.get("R", self.R))
        if "kappa" not in self.explicit:
            changes["kappa"] = min(self.kappa, changes.get("U", self.U))
        return replace(self, **changes)

    def with_values(self, **changes) -> "ExperimentConfig":
        return replace(self, explicit=self.explicit | frozenset(changes), **changes)


# ---------------------------------------------------------------- parsing

def _field_types() -> dict[str, object]:
    hints = typing.get_type_hints(ExperimentConfig)
    return {f.name: hints[f.name] for f in fields(ExperimentConfig) if f.name != "explicit"}


def _parse_scalar(tp, text: str):
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def parse_value(tp, text: str):
    text = text.strip()
    if typing.get_origin(tp) is tuple:
        inner = typing.get_args(tp)[0]
        return tuple(_parse_scalar(inner, part.strip()) for part in text.split(",") if part.strip())
    return _parse_scalar(tp, text)


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, source: str = "<config>", seed_default: bool = True) -> ExperimentConfig:
    types = _field_types()
    values, where = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = parse_value(types[key], value)
        except ValueError as exc:
            raise ConfigurationError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        where[key] = lineno
    if seed_default and "seeds" not in values and os.environ.get(SEED_ENV):
        try:
            values["seeds"] = (int(os.environ[SEED_ENV]),)
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer") from None
    try:
        return ExperimentConfig(**values, explicit=frozenset(values))
    except ConfigurationError as exc:
        lines = sorted(where[k] for k in values if k in str(exc) and k in where)
        prefix = f"{source}:{lines[0]}: " if lines else f"{source}: "
        raise ConfigurationError(prefix + str(exc)) from None


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return parse_config("")
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))


def dump_config(cfg: ExperimentConfig) -> str:
    """Keys that were set explicitly or differ from their defaults, one per line."""
    default = ExperimentConfig()
    keys = [n for n in _field_types() if n in cfg.explicit or getattr(cfg, n) != getattr(default, n)]
    return "".join(f"{name}={format_value(getattr(cfg, name))}\n" for name in keys)
