"""Standard tomography baseline: MUB measurements and maximum likelihood."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatchError, UnsupportedDimensionError
from .qstate import DensityMatrix, Ket

MLE_TOL = 1e-10
MLE_MAX_ITER = 10_000
RRR_ITER = 200


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    i = 2
    while i * i <= n:
        if n % i == 0:
            return False
        i += 1
    return True


@dataclass(frozen=True)
class MubSet:
    dim: int
    bases: tuple[tuple[Ket, ...], ...]

    @property
    def settings(self) -> list[Ket]:
        return [k for basis in self.bases for k in basis]

    @property
    def basis_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.bases)), self.dim)

    def matrix(self) -> np.ndarray:
        """Settings stacked as rows, shape (d(d+1), d)."""
        return np.array([k.amps for k in self.settings])

    def __len__(self):
        return self.dim * len(self.bases)


def build_mubs(dim: int) -> MubSet:
    """Complete set of d+1 mutually unbiased bases for prime d.

    Uses the computational basis plus the Wootters-Fields bases
    |v_km>_n = w^(k n^2 + m n) / sqrt(d), w = exp(2 pi i / d), for odd d.
    For d = 2 the three Pauli eigenbases are returned.
    """
    if int(dim) != dim or not is_prime(int(dim)):
        raise UnsupportedDimensionError(f"MUB construction needs a prime dimension, got {dim}")
    d = int(dim)
    comp = tuple(Ket.basis(d, i) for i in range(d))
    if d == 2:
        s = 1 / np.sqrt(2)
        x = (Ket([s, s]), Ket([s, -s]))
        y = (Ket([s, 1j * s]), Ket([s, -1j * s]))
        return MubSet(2, (comp, x, y))
    n = np.arange(d)
    w = np.exp(2j * np.pi / d)
    bases = [comp]
    for k in range(d):
        bases.append(tuple(Ket(w ** ((k * n * n + m * n) % d) / np.sqrt(d)) for m in range(d)))
    return MubSet(d, tuple(bases))


@dataclass
class TomogramData:
    settings: list[Ket]
    counts: np.ndarray
    copies_per_setting: int
    basis_index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if len(self.settings) != self.counts.size:
            raise ValueError("settings and counts differ in length")
        if self.basis_index is None:
            self.basis_index = np.zeros(self.counts.size, dtype=int)

    @property
    def dim(self) -> int:
        return self.settings[0].dim

    @property
    def total_copies(self) -> int:
        return len(self.settings) * self.copies_per_setting

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# dim={self.dim} copies_per_setting={self.copies_per_setting}\n")
            w = csv.writer(fh)
            w.writerow(["setting_index", "basis_index", "counts"])
            for i, (b, c) in enumerate(zip(self.basis_index, self.counts)):
                w.writerow([i, int(b), int(c)])

    @classmethod
    def from_csv(cls, path, mubs: Optional[MubSet] = None) -> "TomogramData":
        """Read a MUB tomogram; settings are rebuilt from the MUB construction."""
        with open(path, encoding="utf-8") as fh:
            meta = dict(kv.split("=") for kv in fh.readline().lstrip("# ").split())
            rows = list(csv.DictReader(fh))
        d = int(meta["dim"])
        mubs = mubs or build_mubs(d)
        allset = mubs.settings
        idx = [int(r["setting_index"]) for r in rows]
        return cls([allset[i] for i in idx], [int(r["counts"]) for r in rows],
                   int(meta["copies_per_setting"]), np.array([int(r["basis_index"]) for r in rows]))


def acquire_tomogram(oracle, mubs: MubSet, copies_per_setting: Optional[int] = None) -> TomogramData:
    """Measure every MUB projector once with a fixed copy budget per setting."""
    if oracle.dim != mubs.dim:
        raise DimensionMismatchError(f"oracle dimension {oracle.dim} != MUB dimension {mubs.dim}")
    if copies_per_setting is not None and copies_per_setting != oracle.copies_per_query:
        oracle = oracle.with_copies(copies_per_setting)
    counts = [oracle.query_counts(s) for s in mubs.settings]
    return TomogramData(mubs.settings, counts, oracle.copies_per_query, mubs.basis_index)


def trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(a - b))))


@dataclass
class MLEInfo:
    converged: bool
    iterations: int
    log_likelihood: float


def _loglik(rho, proj, freqs):
    p = np.real(np.einsum("sij,ji->s", proj, rho))
    return float(np.sum(freqs * np.log(np.clip(p, 1e-300, None)))), p


def _project_simplex(w: np.ndarray) -> np.ndarray:
    """Euclidean projection of a real vector onto the probability simplex."""
    u = np.sort(w)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, w.size + 1)
    r = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(w - css[r] / (r + 1), 0.0)


def _project_state(h: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (h + h.conj().T))
    return (v * _project_simplex(w)) @ v.conj().T


def _rrr(rho, proj, freqs, c, tol, max_iter):
    """Diluted R rho R iteration; returns (rho, log-likelihood, iterations, converged)."""
    d = rho.shape[0]
    ll, p = _loglik(rho, proj, freqs)
    eps = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        r = np.einsum("s,sij->ij", freqs / np.clip(p, 1e-300, None), proj) / c
        while True:
            rd = (np.eye(d) + eps * r) / (1 + eps)
            new = rd @ rho @ rd
            new = 0.5 * (new + new.conj().T)
            new /= np.trace(new).real
            new_ll, new_p = _loglik(new, proj, freqs)
            if new_ll >= ll - 1e-15 or eps < 1e-6:
                break
            eps *= 0.5
        step = trace_distance(new, rho)
        rho, ll, p = new, new_ll, new_p
        if step < tol:
            return rho, ll, it, True
    return rho, ll, it, False


def _apg(rho, proj, freqs, tol, max_iter):
    """Accelerated projected gradient ascent of the log-likelihood with restarts.

    Projection onto states clips eigenvalues onto the simplex, so a rank
    deficient optimum is approached linearly rather than as 1/k.
    """
    def nll(x):
        p = np.real(np.einsum("sij,ji->s", proj, x))
        if np.any(p <= 0):
            return np.inf, p
        return -float(freqs @ np.log(p)), p

    t, theta = 1.0, 1.0
    f_rho, _ = nll(rho)
    sig = rho
    it = 0
    for it in range(1, max_iter + 1):
        f_sig, p_sig = nll(sig)
        if not np.isfinite(f_sig):
            sig, theta = rho, 1.0
            f_sig, p_sig = nll(sig)
        grad = -np.einsum("s,sij->ij", freqs / p_sig, proj)
        while True:
            new = _project_state(sig - t * grad)
            f_new, _ = nll(new)
            delta = new - sig
            bound = f_sig + np.real(np.vdot(grad, delta)) + np.real(np.vdot(delta, delta)) / (2 * t)
            if f_new <= bound + 1e-15 or t < 1e-12:
                break
            t *= 0.5
        if f_new > f_rho and sig is not rho:
            # momentum overshot: restart from the last iterate
            sig, theta = rho, 1.0
            continue
        step = trace_distance(new, rho)
        theta_next = (1 + np.sqrt(1 + 4 * theta * theta)) / 2
        sig = new + ((theta - 1) / theta_next) * (new - rho)
        rho, f_rho, theta = new, min(f_new, f_rho), theta_next
        if step < tol:
            return rho, -f_rho, it, True
    return rho, -f_rho, it, False


def mle_reconstruct(data: TomogramData, tol: float = MLE_TOL, max_iter: int = MLE_MAX_ITER,
                    return_info: bool = False):
    """Maximum-likelihood density matrix.

    Starts with the diluted R rho R iteration; a step that lowers the
    likelihood is retried with the dilution (1 + eps R)/(1 + eps) at half the
    previous eps. R rho R slows to 1/k when the optimum is rank deficient,
    so after ``RRR_ITER`` steps the remaining budget goes to accelerated
    projected gradient. Both stop once successive iterates are closer than
    ``tol`` in trace distance.

    The settings must resolve the identity up to a constant (true for any
    union of complete bases), which makes the Poisson and multinomial
    likelihoods coincide.
    """
    vecs = np.array([s.amps for s in data.settings])
    d = vecs.shape[1]
    proj = np.einsum("si,sj->sij", vecs, vecs.conj())
    frame = proj.sum(axis=0)
    c = np.trace(frame).real / d
    if np.max(np.abs(frame - c * np.eye(d))) > 1e-9:
        raise ValueError("measurement settings do not resolve the identity")
    total = data.counts.sum()
    if total == 0:
        raise ValueError("tomogram contains no counts")
    freqs = data.counts / total
    rho = np.eye(d, dtype=np.complex128) / d
    rho, ll, it, converged = _rrr(rho, proj, freqs, c, tol, min(RRR_ITER, max_iter))
    if not converged and it < max_iter:
        rho2, ll2, it2, converged = _apg(rho, proj, freqs, tol, max_iter - it)
        it += it2
        if ll2 >= ll:
            rho, ll = rho2, ll2
    # guard against round-off leaving tiny negative eigenvalues
    w, v = np.linalg.eigh(rho)
    w = np.clip(w, 0.0, None)
    rho = (v * w) @ v.conj().T
    rho /= np.trace(rho).real
    out = DensityMatrix(0.5 * (rho + rho.conj().T))
    if return_info:
        return out, MLEInfo(converged, it, ll)
    return out


def project_pure(rho: DensityMatrix, degeneracy_tol: float = 1e-12) -> Ket:
    """Dominant eigenvector, with a deterministic phase and tie-break.

    When the top eigenvalue is degenerate, the eigenspace projector is
    applied to the computational basis vector with the largest weight in it
    (lowest index on ties). The returned vector's largest-magnitude
    amplitude (lowest index on ties) is made real and positive.
    """
    w, v = np.linalg.eigh(rho.elements)
    top = w[-1]
    span = v[:, w >= top - degeneracy_tol]
    if span.shape[1] == 1:
        vec = span[:, 0]
    else:
        p = span @ span.conj().T
        j = int(np.argmax(np.round(np.real(np.diag(p)), 12)))
        vec = p[:, j] / np.linalg.norm(p[:, j])
    mags = np.round(np.abs(vec), 12)
    j = int(np.argmax(mags))
    vec = vec * np.exp(-1j * np.angle(vec[j]))
    return Ket(vec / np.linalg.norm(vec))
