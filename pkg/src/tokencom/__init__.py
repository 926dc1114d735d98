"""Multi-user downlink token communication: environment, hybrid DQN/DDPG agent,
baselines, brute-force oracle and experiment presets."""

from .channel import ChannelConfig, compute_powers, compute_rates, compute_sinr, sample_channels
from .env import AllocationDecision, EpisodeConfig, SlotOutcome, TokenComEnv, ViolationFlags
from .errors import (
    AgreementImpossible, BufferNotReady, ConfigurationError, EnumerationBoundExceeded, EpisodeFinished,
    ProtocolError, ProtocolViolation, TokenComError,
)
from .tokenizers import TokenizerSpec, VideoParams, compression_rate, load_catalog, required_bitrate
from .training import AgentSettings, BaselineKind, evaluate, train

__all__ = [
    "AgentSettings", "AgreementImpossible", "AllocationDecision", "BaselineKind", "BufferNotReady", "ChannelConfig",
    "ConfigurationError", "EnumerationBoundExceeded", "EpisodeConfig", "EpisodeFinished", "ProtocolError",
    "ProtocolViolation", "SlotOutcome", "TokenComEnv", "TokenComError", "TokenizerSpec", "VideoParams",
    "ViolationFlags", "compression_rate", "compute_powers", "compute_rates", "compute_sinr", "evaluate",
    "load_catalog", "required_bitrate", "sample_channels", "train",
]
__version__ = "0.1.0"
