"""Simulated prepare-and-measure experiment returning photon counts.

The oracle hides the prepared state. Algorithms only see integer counts
from ``query_counts``; the ``evaluation`` view exists for scoring traces.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Protocol

import numpy as np

from .errors import ConfigError, DimensionMismatchError, OracleError
from .qstate import DensityMatrix, Ket, as_rng, fidelity, fidelity_mixed

# Placeholder technical-noise level; the measured value is not published.
DEFAULT_CROSSTALK = 0.01
DEFAULT_DARK_RATE_HZ = 100.0


def uniform_crosstalk(dim: int, eps: float) -> np.ndarray:
    """Population-transfer matrix leaking a fraction ``eps`` evenly over all modes."""
    return (1.0 - eps) * np.eye(dim) + eps * np.full((dim, dim), 1.0 / dim)


def neighbour_crosstalk(dim: int, eps: float) -> np.ndarray:
    """Leak a fraction ``eps`` of each mode's population to its adjacent modes."""
    c = np.eye(dim) * (1.0 - eps)
    for i in range(dim):
        nbrs = [j for j in (i - 1, i + 1) if 0 <= j < dim]
        for j in nbrs:
            c[i, j] += eps / len(nbrs)
    return c


@dataclass(frozen=True)
class NoiseProfile:
    """Statistical and technical noise of the simulated detector.

    Exactly one of ``copies_per_setting`` and ``rate_hz`` sets the mean
    number of signal photons per measurement setting. ``crosstalk`` is a
    row-stochastic population-transfer matrix (None means identity) and
    ``loss`` holds per-mode transmissions (None means lossless).
    """

    copies_per_setting: Optional[int] = None
    rate_hz: Optional[float] = None
    integration_time_s: float = 1.0
    dark_rate_hz: float = 0.0
    dark_counts: float = 0.0
    crosstalk: Optional[np.ndarray] = field(default=None, compare=False)
    loss: Optional[np.ndarray] = field(default=None, compare=False)
    shot_noise: bool = True

    def __post_init__(self):
        if (self.copies_per_setting is None) == (self.rate_hz is None):
            raise ConfigError("set exactly one of copies_per_setting and rate_hz", "noise")
        if self.copies_per_setting is not None and self.copies_per_setting <= 0:
            raise ConfigError("must be positive", "noise.copies_per_setting")
        if self.rate_hz is not None and self.rate_hz <= 0:
            raise ConfigError("must be positive", "noise.rate_hz")
        if self.integration_time_s <= 0:
            raise ConfigError("must be positive", "noise.integration_time_s")
        if self.dark_rate_hz < 0 or self.dark_counts < 0:
            raise ConfigError("dark counts must be non-negative", "noise.dark_rate_hz")
        if self.crosstalk is not None:
            c = np.asarray(self.crosstalk, dtype=float)
            if c.ndim != 2 or c.shape[0] != c.shape[1]:
                raise ConfigError("must be a square matrix", "noise.crosstalk")
            if np.any(c < 0) or np.max(np.abs(c.sum(axis=1) - 1.0)) > 1e-9:
                raise ConfigError("must be non-negative with rows summing to 1", "noise.crosstalk")
            object.__setattr__(self, "crosstalk", c)
        if self.loss is not None:
            eta = np.asarray(self.loss, dtype=float).reshape(-1)
            if np.any(eta <= 0) or np.any(eta > 1):
                raise ConfigError("transmissions must lie in (0, 1]", "noise.loss")
            object.__setattr__(self, "loss", eta)

    @property
    def signal_mean(self) -> float:
        """Mean photon number for a setting with unit overlap."""
        if self.copies_per_setting is not None:
            return float(self.copies_per_setting)
        return self.rate_hz * self.integration_time_s

    @property
    def dark_mean(self) -> float:
        if self.rate_hz is not None:
            return self.dark_rate_hz * self.integration_time_s + self.dark_counts
        return self.dark_counts

    @property
    def copies(self) -> int:
        """State copies consumed by one measurement setting."""
        return int(round(self.signal_mean))

    def with_(self, **changes) -> "NoiseProfile":
        return replace(self, **changes)


def low_noise(dim: int) -> NoiseProfile:
    return NoiseProfile(rate_hz=1e5, integration_time_s=1.0,
                        dark_rate_hz=DEFAULT_DARK_RATE_HZ,
                        crosstalk=uniform_crosstalk(dim, DEFAULT_CROSSTALK))


def high_noise(dim: int) -> NoiseProfile:
    # ~80 copies for qutrits and ququints, ~1000 for quvigints
    n = 80 if dim <= 5 else 1000
    return NoiseProfile(copies_per_setting=n,
                        crosstalk=uniform_crosstalk(dim, DEFAULT_CROSSTALK))


def noiseless(dim: int, copies: int = 10**9) -> NoiseProfile:
    """Exact expected counts at a very large copy number; for tests and references."""
    return NoiseProfile(copies_per_setting=copies, shot_noise=False)


NOISE_PRESETS = {
    "low-noise": low_noise,
    "high-noise": high_noise,
    "high-noise-d3d5": lambda d: high_noise(d).with_(copies_per_setting=80),
    "high-noise-d20": lambda d: high_noise(d).with_(copies_per_setting=1000),
    "turbulence": low_noise,
    "noiseless": noiseless,
}


class Channel(Protocol):
    dim: int

    def transfer_matrix(self, rng: np.random.Generator) -> np.ndarray:
        """Fresh d x d mode-transfer matrix for one measurement."""


def crosstalk_channel(rho: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Apply a population-transfer matrix as a CPTP map.

    Population that stays in mode i keeps its coherence with amplitude
    sqrt(c_ii); population hopping i -> j arrives incoherently.
    """
    keep = np.sqrt(np.diag(c))
    out = rho * np.outer(keep, keep)
    pops = np.real(np.diag(rho))
    off = c - np.diag(np.diag(c))
    out = out + np.diag(pops @ off)
    return out


class _Evaluation:
    """Evaluation-only access to the hidden state. Never used by estimators."""

    def __init__(self, oracle: "MeasurementOracle"):
        self._o = oracle

    @property
    def true_state(self):
        return self._o._state

    def fidelity(self, estimate) -> float:
        s = self._o._state
        if isinstance(s, Ket) and isinstance(estimate, Ket):
            return fidelity(s, estimate)
        return fidelity_mixed(s, estimate)

    def expected_probability(self, setting) -> float:
        """Detected probability including loss and crosstalk but no channel or shot noise."""
        return self._o._probability(_vec(setting, self._o.dim), None)


def _vec(setting, dim) -> np.ndarray:
    a = setting.amps if isinstance(setting, Ket) else np.asarray(setting, dtype=np.complex128).reshape(-1)
    if a.size != dim:
        raise DimensionMismatchError(f"setting dimension {a.size} != oracle dimension {dim}")
    return a


class MeasurementOracle:
    """Maps a measurement setting to Poisson photon counts.

    Each query consumes ``copies_per_query`` copies of the hidden state and,
    if a turbulence channel is attached, a freshly drawn transfer matrix.
    """

    def __init__(self, true_state, noise: NoiseProfile, channel: Optional[Channel] = None,
                 rng=None):
        if not isinstance(true_state, (Ket, DensityMatrix)):
            raise TypeError("true_state must be a Ket or a DensityMatrix")
        self._state = true_state
        self.dim = true_state.dim
        self.noise = noise
        self.channel = channel
        self.rng = as_rng(rng)
        if noise.crosstalk is not None and noise.crosstalk.shape != (self.dim, self.dim):
            raise DimensionMismatchError("crosstalk matrix does not match state dimension")
        if noise.loss is not None and noise.loss.size != self.dim:
            raise DimensionMismatchError("loss vector does not match state dimension")
        if channel is not None and channel.dim != self.dim:
            raise DimensionMismatchError("channel dimension does not match state dimension")
        self._pure = isinstance(true_state, Ket) and noise.crosstalk is None
        if isinstance(true_state, Ket):
            self._psi = true_state.amps
            self._rho = np.outer(self._psi, self._psi.conj())
        else:
            self._psi = None
            self._rho = true_state.elements
        self.queries = 0
        self.evaluation = _Evaluation(self)

    @property
    def copies_per_query(self) -> int:
        return self.noise.copies

    @property
    def copies_used(self) -> int:
        return self.queries * self.copies_per_query

    def with_copies(self, copies: int) -> "MeasurementOracle":
        """Same state, channel and random stream with a different per-setting budget.

        In rate mode the integration time is rescaled, so dark counts scale too.
        """
        n = self.noise
        if n.copies_per_setting is not None:
            scale = copies / n.copies_per_setting
            noise = n.with_(copies_per_setting=int(copies), dark_counts=n.dark_counts * scale)
        else:
            noise = n.with_(integration_time_s=copies / n.rate_hz)
        return MeasurementOracle(self._state, noise, self.channel, self.rng)

    def ideal_probability(self, setting) -> float:
        """Noise-free overlap <s|rho|s>; test hook."""
        s = _vec(setting, self.dim)
        return float(np.real(np.vdot(s, self._rho @ s)))

    def _probability(self, s: np.ndarray, transfer: Optional[np.ndarray]) -> float:
        if self._pure:
            psi = self._psi if transfer is None else transfer @ self._psi
            p = abs(np.vdot(s, psi)) ** 2
        else:
            rho = self._rho if transfer is None else transfer @ self._rho @ transfer.conj().T
            if self.noise.crosstalk is not None:
                rho = crosstalk_channel(rho, self.noise.crosstalk)
            p = np.real(np.vdot(s, rho @ s))
        if self.noise.loss is not None:
            # setting-weighted transmission of the measurement hologram
            p *= float(np.dot(np.abs(s) ** 2, self.noise.loss))
        return p

    def expected_counts(self, setting, transfer: Optional[np.ndarray] = None) -> float:
        s = _vec(setting, self.dim)
        p = self._probability(s, transfer)
        if not np.isfinite(p):
            raise OracleError(f"non-finite detection probability {p!r}; check channel configuration")
        return max(p, 0.0) * self.noise.signal_mean + self.noise.dark_mean

    def query_counts(self, setting) -> int:
        transfer = None
        if self.channel is not None:
            transfer = self.channel.transfer_matrix(self.rng)
        mean = self.expected_counts(setting, transfer)
        self.queries += 1
        if not self.noise.shot_noise:
            return int(round(mean))
        return int(self.rng.poisson(mean))
