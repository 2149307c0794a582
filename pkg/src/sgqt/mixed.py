"""Self-guided estimation of mixed states.

The estimate is a lower-triangular factor T, so every real parameter vector
gives a valid density matrix. ``realize`` uses rho = T T^dagger / Tr(T T^dagger).
The search itself defaults to the root map rho = |T| / Tr|T| with
|T| = (T T^dagger)^(1/2), whose eigenvalues are the singular values of T.
Near a rank-deficient target the score is quadratic in the missing
eigenvalue, so the square map makes it quartic in the parameters and SPSA
stalls; the root map keeps it quadratic.

SPSA with a +/-1 perturbation alphabet ascends a log-likelihood score
computed from fresh counts on the MUB projectors at every iteration.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateVectorError, DimensionMismatchError
from .mub import build_mubs
from .qstate import DensityMatrix, as_rng
from .spsa import GainSchedule

# Mixed-state gains (tuned on simulated qutrits, see README)
MIXED_SCHEDULE = GainSchedule(a=10.0, A=20.0, s=0.602, b=0.1, t=0.101)


@dataclass(frozen=True)
class MixedParam:
    dim: int
    tri: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tri, dtype=np.complex128)
        if t.shape != (self.dim, self.dim):
            raise DimensionMismatchError(f"tri must be {self.dim}x{self.dim}")
        object.__setattr__(self, "tri", np.tril(t))

    @classmethod
    def from_vector(cls, theta: np.ndarray, dim: int) -> "MixedParam":
        """Real parameters: d diagonal entries then real and imaginary strictly-lower parts."""
        theta = np.asarray(theta, dtype=float)
        if theta.size != dim * dim:
            raise DimensionMismatchError(f"expected {dim * dim} parameters, got {theta.size}")
        t = np.zeros((dim, dim), dtype=np.complex128)
        t[np.diag_indices(dim)] = theta[:dim]
        rows, cols = np.tril_indices(dim, -1)
        m = rows.size
        t[rows, cols] = theta[dim:dim + m] + 1j * theta[dim + m:]
        return cls(dim, t)

    def to_vector(self) -> np.ndarray:
        rows, cols = np.tril_indices(self.dim, -1)
        low = self.tri[rows, cols]
        return np.concatenate([np.real(np.diag(self.tri)), low.real, low.imag])


def _rho_square(t: np.ndarray) -> np.ndarray:
    m = t @ t.conj().T
    tr = np.trace(m).real
    if not tr > 1e-300:
        raise DegenerateVectorError("all-zero triangular factor")
    return m / tr


def _rho_root(t: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(t @ t.conj().T)
    w = np.sqrt(np.clip(w, 0.0, None))
    tr = w.sum()
    if not tr > 1e-150:
        raise DegenerateVectorError("all-zero triangular factor")
    m = (v * w) @ v.conj().T
    return 0.5 * (m + m.conj().T) / tr


_REALIZATIONS = {"square": _rho_square, "root": _rho_root}


def realize(param: MixedParam) -> DensityMatrix:
    """rho = T T^dagger / Tr(T T^dagger)."""
    return DensityMatrix(_rho_square(param.tri))


def realize_root(param: MixedParam) -> DensityMatrix:
    """rho = |T| / Tr|T|; also surjective (take T as a Cholesky factor of rho^2)."""
    return DensityMatrix(_rho_root(param.tri))


def _score(theta, dim, proj, freqs, to_rho=_rho_root):
    rho = to_rho(MixedParam.from_vector(theta, dim).tri)
    p = np.real(np.einsum("sij,ji->s", proj, rho))
    p = np.clip(p, 1e-300, None)
    return float(np.sum(freqs * np.log(p / p.sum())))


@dataclass
class MixedTraceRecord:
    k: int
    fidelity_true: float
    copies_used: int


def run_sgqt_mixed(oracle, dim: int, iterations: int, sched: Optional[GainSchedule] = None,
                   settings_per_objective: Optional[int] = None, rng=None,
                   initial: Optional[MixedParam] = None, record: bool = True,
                   realization: str = "root"):
    """SPSA over the triangular parametrization against oracle counts.

    Each iteration measures ``settings_per_objective`` MUB projectors
    (default: the full set; smaller values walk through the set cyclically)
    and scores both perturbed parameter points against the same counts.
    ``realization`` picks the parameter-to-state map, "root" or "square".
    Returns the final DensityMatrix and a list of trace records.
    """
    if realization not in _REALIZATIONS:
        raise ValueError(f"realization must be one of {sorted(_REALIZATIONS)}")
    to_rho = _REALIZATIONS[realization]
    if oracle.dim != dim:
        raise DimensionMismatchError(f"oracle dimension {oracle.dim} != {dim}")
    sched = sched or MIXED_SCHEDULE
    rng = as_rng(rng)
    mubs = build_mubs(dim)
    vecs = mubs.matrix()
    proj_all = np.einsum("si,sj->sij", vecs, vecs.conj())
    n_set = len(vecs)
    batch = n_set if settings_per_objective is None else int(settings_per_objective)
    if not 1 <= batch <= n_set:
        raise ValueError(f"settings_per_objective must lie in [1, {n_set}]")
    theta = (initial.to_vector() if initial is not None
             else MixedParam(dim, np.eye(dim)).to_vector())
    trace: list[MixedTraceRecord] = []
    copies = 0
    cursor = 0
    for k in range(iterations):
        alpha, beta = sched.alpha(k), sched.beta(k)
        idx = (cursor + np.arange(batch)) % n_set
        cursor = (cursor + batch) % n_set
        counts = np.array([oracle.query_counts(mubs.settings[i]) for i in idx], dtype=float)
        copies += batch * oracle.copies_per_query
        total = counts.sum()
        if total > 0:
            delta = rng.choice([-1.0, 1.0], size=theta.size)
            freqs = counts / total
            proj = proj_all[idx]
            try:
                up = _score(theta + beta * delta, dim, proj, freqs, to_rho)
                down = _score(theta - beta * delta, dim, proj, freqs, to_rho)
            except DegenerateVectorError:
                pass
            else:
                g = (up - down) / (2 * beta) * delta
                new = theta + alpha * g
                if np.any(new != 0):
                    theta = new
        if record:
            est = DensityMatrix(to_rho(MixedParam.from_vector(theta, dim).tri))
            trace.append(MixedTraceRecord(k, oracle.evaluation.fidelity(est), copies))
    return DensityMatrix(to_rho(MixedParam.from_vector(theta, dim).tri)), trace

