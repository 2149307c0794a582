"""Pure and mixed qudit states, Haar sampling and fidelities."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import (
    DegenerateVectorError,
    DimensionMismatchError,
    InvalidDimensionError,
    InvalidStateError,
)

NORM_TOL = 1e-12
DEGENERATE_NORM = 1e-14
DM_TOL = 1e-10


def as_rng(rng) -> np.random.Generator:
    """Accept a Generator, a seed, or None."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _check_dim(dim: int) -> int:
    if int(dim) != dim or dim < 2:
        raise InvalidDimensionError(f"dimension must be an integer >= 2, got {dim!r}")
    return int(dim)


class Ket:
    """Unit-norm state vector.

    Amplitudes are stored read-only. Global phase is never canonicalized, so
    two kets describing the same ray compare equal only through ``fidelity``.
    """

    __slots__ = ("amps",)

    def __init__(self, amps, *, check: bool = True):
        a = np.array(amps, dtype=np.complex128).reshape(-1)
        if a.size < 2:
            raise InvalidDimensionError(f"dimension must be >= 2, got {a.size}")
        if check:
            n = np.linalg.norm(a)
            if abs(n - 1.0) > NORM_TOL:
                raise InvalidStateError(f"ket norm is {n!r}, expected 1")
        a.flags.writeable = False
        self.amps = a

    @property
    def dim(self) -> int:
        return self.amps.size

    @classmethod
    def basis(cls, dim: int, index: int) -> "Ket":
        dim = _check_dim(dim)
        a = np.zeros(dim, dtype=np.complex128)
        a[index] = 1.0
        return cls(a)

    def projector(self) -> "DensityMatrix":
        return DensityMatrix(np.outer(self.amps, self.amps.conj()))

    def __array__(self, dtype=None, copy=None):
        return self.amps if dtype is None else self.amps.astype(dtype)

    def __len__(self):
        return self.dim

    def __repr__(self):
        return f"Ket({np.array2string(self.amps, precision=4)})"


class DensityMatrix:
    """Hermitian, unit-trace, positive semidefinite matrix (checked on construction)."""

    __slots__ = ("elements",)

    def __init__(self, elements, *, check: bool = True):
        m = np.array(elements, dtype=np.complex128)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidStateError(f"density matrix must be square, got shape {m.shape}")
        if m.shape[0] < 2:
            raise InvalidDimensionError(f"dimension must be >= 2, got {m.shape[0]}")
        if check:
            if np.max(np.abs(m - m.conj().T)) > DM_TOL:
                raise InvalidStateError("density matrix is not Hermitian")
            tr = np.trace(m).real
            if abs(tr - 1.0) > DM_TOL:
                raise InvalidStateError(f"density matrix trace is {tr!r}")
            lo = np.linalg.eigvalsh(m).min()
            if lo < -DM_TOL:
                raise InvalidStateError(f"density matrix has negative eigenvalue {lo!r}")
        m.flags.writeable = False
        self.elements = m

    @property
    def dim(self) -> int:
        return self.elements.shape[0]

    @classmethod
    def maximally_mixed(cls, dim: int) -> "DensityMatrix":
        dim = _check_dim(dim)
        return cls(np.eye(dim) / dim)

    def purity(self) -> float:
        return float(np.real(np.trace(self.elements @ self.elements)))

    def __array__(self, dtype=None, copy=None):
        return self.elements if dtype is None else self.elements.astype(dtype)

    def __repr__(self):
        return f"DensityMatrix(dim={self.dim}, purity={self.purity():.4f})"


class LGModeLabel(NamedTuple):
    """Laguerre-Gaussian mode indices: azimuthal ``l`` and radial ``p``."""

    l: int
    p: int

    @property
    def order(self) -> int:
        # number of modes sharing this Gouy phase
        return 2 * self.p + abs(self.l) + 1


def fixed_order_labels(dim: int) -> list[LGModeLabel]:
    """All LG labels with 2p + |l| + 1 == dim, ordered by ascending l."""
    dim = _check_dim(dim)
    n = dim - 1
    return [LGModeLabel(l, (n - abs(l)) // 2) for l in range(-n, n + 1, 2)]


def normalize(raw) -> Ket:
    a = np.asarray(raw, dtype=np.complex128).reshape(-1)
    n = np.linalg.norm(a)
    if not np.isfinite(n) or n < DEGENERATE_NORM:
        raise DegenerateVectorError(f"cannot normalize vector with norm {n!r}")
    return Ket(a / n, check=False)


def random_haar_ket(dim: int, rng=None) -> Ket:
    """Haar-random pure state from a normalized complex Ginibre vector."""
    dim = _check_dim(dim)
    rng = as_rng(rng)
    v = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    return normalize(v)


def random_unitary(dim: int, rng=None) -> np.ndarray:
    """Haar-random unitary via QR with the phase correction of Mezzadri."""
    rng = as_rng(rng)
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    ph = np.diag(r) / np.abs(np.diag(r))
    return q * ph


def random_density_matrix(dim: int, rank: int | None = None, rng=None,
                          measure: str = "bures") -> DensityMatrix:
    """Random mixed state of the given rank.

    ``measure="hs"`` uses G G^dagger with a d x rank Ginibre matrix G;
    ``measure="bures"`` uses (1 + U) G G^dagger (1 + U)^dagger with U Haar.
    """
    dim = _check_dim(dim)
    rank = dim if rank is None else int(rank)
    if not 1 <= rank <= dim:
        raise InvalidDimensionError(f"rank must lie in [1, {dim}], got {rank}")
    rng = as_rng(rng)
    g = rng.standard_normal((dim, rank)) + 1j * rng.standard_normal((dim, rank))
    if measure == "bures":
        g = (np.eye(dim) + random_unitary(dim, rng)) @ g
    elif measure != "hs":
        raise ValueError(f"unknown measure {measure!r}")
    rho = g @ g.conj().T
    rho = 0.5 * (rho + rho.conj().T)
    return DensityMatrix(rho / np.trace(rho).real)


def _amps(x) -> np.ndarray:
    return x.amps if isinstance(x, Ket) else np.asarray(x, dtype=np.complex128).reshape(-1)


def fidelity(x, y) -> float:
    """|<x|y>|^2 for two kets of equal dimension."""
    a, b = _amps(x), _amps(y)
    if a.size != b.size:
        raise DimensionMismatchError(f"dimensions differ: {a.size} vs {b.size}")
    f = abs(np.vdot(a, b)) ** 2
    return float(min(max(f, 0.0), 1.0))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    w = np.sqrt(np.clip(w, 0.0, None))
    return (v * w) @ v.conj().T


def _as_dm(x) -> np.ndarray:
    if isinstance(x, DensityMatrix):
        return x.elements
    if isinstance(x, Ket):
        return np.outer(x.amps, x.amps.conj())
    return DensityMatrix(x).elements


def fidelity_mixed(rho, sigma) -> float:
    """Uhlmann fidelity (Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2.

    Kets are accepted and promoted to projectors.
    """
    r, s = _as_dm(rho), _as_dm(sigma)
    if r.shape != s.shape:
        raise DimensionMismatchError(f"dimensions differ: {r.shape[0]} vs {s.shape[0]}")
    # a pure argument gives F = <psi|other|psi> exactly; the square-root route
    # would add ~1e-8 from sqrt of round-off eigenvalues
    for a, b in ((r, s), (s, r)):
        w, v = np.linalg.eigh(a)
        if w[-1] > 1.0 - 1e-12:
            psi = v[:, -1]
            f = np.real(np.vdot(psi, b @ psi))
            return float(min(max(f, 0.0), 1.0))
    sr = _psd_sqrt(r)
    m = sr @ s @ sr
    mu = np.linalg.eigvalsh(0.5 * (m + m.conj().T))
    f = np.sum(np.sqrt(np.clip(mu, 0.0, None))) ** 2
    return float(min(max(f, 0.0), 1.0))
