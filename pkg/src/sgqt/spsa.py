"""Self-guided tomography: complex SPSA ascent of the measured overlap."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import (
    ConfigError,
    DegenerateVectorError,
    DimensionMismatchError,
    InvalidDimensionError,
    ZeroCountsError,
)
from .qstate import Ket, as_rng, fidelity, normalize, random_haar_ket

ALPHABET = np.array([1, -1, 1j, -1j], dtype=np.complex128)
MAX_RESAMPLES = 100


@dataclass(frozen=True)
class GainSchedule:
    """Gain sequences alpha_k = a/(k+1+A)^s and beta_k = b/(k+1)^t."""

    a: float = 3.0
    A: float = 0.0
    s: float = 0.602
    b: float = 0.1
    t: float = 0.101

    def __post_init__(self):
        for name in ("a", "s", "b", "t"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be positive", f"schedule.{name}")
        if not self.A >= 0:
            raise ConfigError("must be non-negative", "schedule.A")

    def alpha(self, k: int) -> float:
        return self.a / (k + 1 + self.A) ** self.s

    def beta(self, k: int) -> float:
        return self.b / (k + 1) ** self.t


def gains(k: int, sched: GainSchedule) -> tuple[float, float]:
    return sched.alpha(k), sched.beta(k)


class PerturbationDirection:
    """Length-d vector with entries in {1, -1, i, -i}."""

    __slots__ = ("entries",)

    def __init__(self, entries):
        e = np.array(entries, dtype=np.complex128).reshape(-1)
        if e.size < 2:
            raise InvalidDimensionError(f"dimension must be >= 2, got {e.size}")
        if not np.all(np.min(np.abs(e[:, None] - ALPHABET[None, :]), axis=1) < 1e-12):
            raise ValueError("direction entries must lie in {1, -1, i, -i}")
        e.flags.writeable = False
        self.entries = e

    @property
    def dim(self) -> int:
        return self.entries.size

    def inverse_conj(self) -> np.ndarray:
        # entrywise (1/x)^* equals x for unit-modulus x
        return self.entries


def sample_direction(dim: int, rng) -> PerturbationDirection:
    if int(dim) != dim or dim < 2:
        raise InvalidDimensionError(f"dimension must be an integer >= 2, got {dim!r}")
    rng = as_rng(rng)
    return PerturbationDirection(ALPHABET[rng.integers(0, 4, size=int(dim))])


class CountPair(NamedTuple):
    n_plus: int
    n_minus: int


def _delta(delta) -> np.ndarray:
    return delta.entries if isinstance(delta, PerturbationDirection) else np.asarray(delta, dtype=np.complex128)


def perturb(sigma: Ket, beta: float, delta) -> tuple[Ket, Ket]:
    """Normalized probe states sigma +/- beta * delta."""
    d = _delta(delta)
    if d.size != sigma.dim:
        raise DimensionMismatchError(f"direction dimension {d.size} != state dimension {sigma.dim}")
    return normalize(sigma.amps + beta * d), normalize(sigma.amps - beta * d)


def estimate_gradient(counts: CountPair, beta: float, delta) -> np.ndarray:
    """Count-ratio gradient estimate.

    The normalized count difference (N+ - N-)/(N+ + N-) stands in for the
    overlap difference, so no absolute calibration of the detector is needed.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    n_plus, n_minus = counts
    total = n_plus + n_minus
    if total == 0:
        raise ZeroCountsError("no counts recorded for either probe state")
    ratio = (n_plus - n_minus) / total
    d = delta.inverse_conj() if isinstance(delta, PerturbationDirection) else np.conj(1.0 / _delta(delta))
    return (ratio / (2.0 * beta)) * d


def update(sigma: Ket, alpha: float, g) -> Ket:
    g = np.asarray(g, dtype=np.complex128)
    if g.size != sigma.dim:
        raise DimensionMismatchError(f"gradient dimension {g.size} != state dimension {sigma.dim}")
    try:
        return normalize(sigma.amps + alpha * g)
    except DegenerateVectorError:
        return sigma


class TraceRecord(NamedTuple):
    k: int
    fidelity_true: float
    copies_used: int


@dataclass
class Trace:
    iterations: list[TraceRecord] = field(default_factory=list)

    def append(self, k: int, fid: float, copies: int) -> None:
        if self.iterations:
            last = self.iterations[-1]
            assert k > last.k and copies >= last.copies_used
        self.iterations.append(TraceRecord(k, fid, copies))

    @property
    def fidelities(self) -> np.ndarray:
        return np.array([r.fidelity_true for r in self.iterations])

    @property
    def copies(self) -> np.ndarray:
        return np.array([r.copies_used for r in self.iterations], dtype=np.int64)

    def __len__(self):
        return len(self.iterations)


def run_sgqt(oracle, dim: int, iterations: int, sched: Optional[GainSchedule] = None,
             rng=None, initial: Optional[Ket] = None, record: bool = True,
             reference: Optional[Ket] = None) -> tuple[Ket, Trace]:
    """Run self-guided tomography against ``oracle``.

    The oracle is only ever asked for counts. Fidelity to the hidden state
    is read through ``oracle.evaluation`` purely to fill the trace; pass
    ``reference`` to score the trace against another ket instead.
    Iterations where both probes see zero counts leave the estimate
    unchanged but still consume their copies.
    """
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    if oracle.dim != dim:
        raise DimensionMismatchError(f"oracle dimension {oracle.dim} != {dim}")
    sched = sched or GainSchedule()
    rng = as_rng(rng)
    sigma = initial if initial is not None else random_haar_ket(dim, rng)
    if sigma.dim != dim:
        raise DimensionMismatchError("initial state has wrong dimension")
    trace = Trace()
    copies = 0
    per_query = oracle.copies_per_query
    for k in range(iterations):
        alpha, beta = sched.alpha(k), sched.beta(k)
        for _ in range(MAX_RESAMPLES):
            delta = sample_direction(dim, rng)
            try:
                plus, minus = perturb(sigma, beta, delta)
                break
            except DegenerateVectorError:
                continue
        else:
            raise DegenerateVectorError("could not draw a non-degenerate perturbation")
        counts = CountPair(oracle.query_counts(plus), oracle.query_counts(minus))
        copies += 2 * per_query
        try:
            g = estimate_gradient(counts, beta, delta)
        except ZeroCountsError:
            pass
        else:
            sigma = update(sigma, alpha, g)
        if record:
            fid = oracle.evaluation.fidelity(sigma) if reference is None else fidelity(reference, sigma)
            trace.append(k, fid, copies)
    return sigma, trace
