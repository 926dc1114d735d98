"""Rayleigh block-fading downlink channel and closed-form link quantities.

Arrays are indexed ``[user, rb, antenna]``; all quantities are linear (W, Hz).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

THERMAL_NOISE_DBM_HZ = -174.0


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) / 1000.0


def watt_to_dbm(watt: float) -> float:
    return 10.0 * np.log10(watt * 1000.0)


@dataclass(frozen=True)
class ChannelConfig:
    num_antennas: int = 32
    num_users: int = 4
    num_rbs: int = 16
    rb_bandwidth: float = 30e3
    noise_psd: float = dbm_to_watt(THERMAL_NOISE_DBM_HZ)
    channel_variance: float = 1.0
    bs_power: float = 1.0
    # per-user large-scale gain in dB; empty means every user sees channel_variance
    user_gain_db: tuple[float, ...] = ()

    def __post_init__(self):
        if min(self.num_antennas, self.num_users, self.num_rbs) < 1:
            raise ConfigurationError("N, U and R must all be >= 1")
        for name in ("rb_bandwidth", "noise_psd", "channel_variance", "bs_power"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.user_gain_db and len(self.user_gain_db) != self.num_users:
            raise ConfigurationError("user_gain_db needs one entry per user")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.num_users, self.num_rbs, self.num_antennas)

    @property
    def noise_power(self) -> float:
        """Noise power per RB, B*N0 in W."""
        return self.rb_bandwidth * self.noise_psd

    def user_variances(self) -> np.ndarray:
        gains = np.asarray(self.user_gain_db, float) if self.user_gain_db else np.zeros(self.num_users)
        return self.channel_variance * 10.0 ** (gains / 10.0)


def sample_channels(config: ChannelConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw i.i.d. CN(0, sigma^2) entries, shape ``(U, R, N)``."""
    scale = np.sqrt(config.user_variances() / 2.0)[:, None, None]
    re = rng.standard_normal(config.shape)
    im = rng.standard_normal(config.shape)
    return scale * (re + 1j * im)


def _check_shapes(h, kappa, w):
    if h.ndim != 3 or w.shape != h.shape or kappa.shape != h.shape[:2]:
        raise ConfigurationError(
            f"inconsistent shapes: h{h.shape}, w{w.shape}, kappa{kappa.shape}")


def beam_gains(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``g[i, j, l] = |h_i[l]^H w_j[l]|^2``."""
    return np.abs(np.einsum("iln,jln->ijl", h.conj(), w)) ** 2


def compute_sinr(h: np.ndarray, kappa: np.ndarray, w: np.ndarray, config: ChannelConfig) -> np.ndarray:
    """Per-(user, RB) SINR with co-scheduled users on the same RB as interferers."""
    kappa = np.asarray(kappa)
    _check_shapes(h, kappa, w)
    g = beam_gains(h, w)
    U = h.shape[0]
    own = g[np.arange(U), np.arange(U), :]
    # sum_j kappa_j[l] g[i,j,l], then drop the j == i term
    interference = np.einsum("ijl,jl->il", g, kappa) - kappa * own
    return kappa * own / (interference + config.noise_power)


def compute_rates(sinr: np.ndarray, kappa: np.ndarray, bandwidth: float) -> tuple[np.ndarray, np.ndarray]:
    """Shannon rate per (user, RB) and the per-user total over assigned RBs."""
    per_rb = bandwidth * np.log2(1.0 + sinr)
    return per_rb, (np.asarray(kappa) * per_rb).sum(axis=1)


def compute_powers(w: np.ndarray, kappa: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-user power over assigned RBs and the total radiated power over all cells."""
    per_cell = (w.real ** 2 + w.imag ** 2).sum(axis=-1)
    per_user = (np.asarray(kappa) * per_cell).sum(axis=1)
    return per_user, float(per_cell.sum())


def cell_powers(w: np.ndarray) -> np.ndarray:
    return (w.real ** 2 + w.imag ** 2).sum(axis=-1)


def matched_filter(h: np.ndarray, powers: np.ndarray) -> np.ndarray:
    """Beamformers ``sqrt(p) h / ||h||`` for every (user, RB) cell."""
    norms = np.linalg.norm(h, axis=-1, keepdims=True)
    return np.sqrt(np.asarray(powers, float))[..., None] * h / np.where(norms > 0, norms, 1.0)


def calibrate_channel_variance(config: ChannelConfig, target_rate: float) -> float:
    """Channel variance at which one user, served alone on all R RBs with a
    matched filter at ``P_BS / R`` per RB, reaches ``target_rate`` on average
    array gain (``E||h||^2 = N sigma^2``)."""
    per_rb_bits = target_rate / (config.num_rbs * config.rb_bandwidth)
    snr = 2.0 ** per_rb_bits - 1.0
    p = config.bs_power / config.num_rbs
    return snr * config.noise_power / (p * config.num_antennas)
