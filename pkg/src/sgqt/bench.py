"""Ensemble runs, quantile traces and equal-budget comparisons.

A run is described by a RunConfig, usually read from a TOML file. Regime
presets are resolved into concrete noise, schedule and turbulence objects
before any trial starts. Trial ``i`` draws all of its randomness from
``SeedSequence(master_seed, spawn_key=(i,))``, so a single trial can be
replayed from the config and its index, and results do not depend on the
number of workers.
"""
from __future__ import annotations

import csv
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import partial
from math import gcd
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import scipy
from scipy.optimize import minimize

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, SGQTError, TrialFailure, UnsupportedDimensionError
from .mixed import MIXED_SCHEDULE, run_sgqt_mixed
from .mub import acquire_tomogram, build_mubs, is_prime, mle_reconstruct, project_pure
from .oracle import MeasurementOracle, NoiseProfile, high_noise, low_noise, uniform_crosstalk
from .qstate import DensityMatrix, Ket, fidelity, random_density_matrix, random_haar_ket
from .spsa import GainSchedule, run_sgqt
from .turbulence import TurbulenceChannel, TurbulenceConfig, weak_turbulence

log = logging.getLogger(__name__)

REGIMES = ("low-noise", "high-noise", "turbulence", "custom")
MODES = ("sgqt-pure", "sgqt-mixed", "baseline-mub", "compare")
REFERENCES = ("hidden", "operational")

# Under Poisson noise with a few hundred copies the default gains overshoot;
# smaller steps with wider probes are stable in every noisy regime.
NOISY_SCHEDULE = GainSchedule(a=1.0, A=0.0, s=0.602, b=0.3, t=0.101)
REGIME_SCHEDULES = {
    "low-noise": GainSchedule(),
    "high-noise": NOISY_SCHEDULE,
    "turbulence": NOISY_SCHEDULE,
    "custom": GainSchedule(),
}

PRESETS: dict[str, dict[str, Any]] = {
    "low-noise": {"regime": "low-noise"},
    "high-noise": {"regime": "high-noise"},
    "high-noise-d3d5": {"regime": "high-noise", "noise": {"copies_per_setting": 80}},
    "high-noise-d20": {"regime": "high-noise", "dimension": 20,
                       "noise": {"copies_per_setting": 1000}},
    "turbulence": {"regime": "turbulence"},
    "mixed-low-noise": {"regime": "low-noise", "mode": "sgqt-mixed", "iterations": 1000},
    # ten times fewer signal counts, same dark rate
    "mixed-reduced": {"regime": "low-noise", "mode": "sgqt-mixed", "iterations": 1000,
                      "noise": {"rate_hz": 1e4}},
    "compare-loss": {"regime": "low-noise", "mode": "compare", "reference": "operational",
                     "noise": {"loss": 0.6}},
}

_NOISE_KEYS = {f.name for f in fields(NoiseProfile)}
_SCHEDULE_KEYS = {f.name for f in fields(GainSchedule)}
_TURBULENCE_KEYS = {f.name for f in fields(TurbulenceConfig)}


@dataclass(frozen=True)
class RunConfig:
    dimension: int = 3
    regime: str = "low-noise"
    trials: int = 100
    iterations: int = 100
    schedule: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    turbulence: dict = field(default_factory=dict)
    master_seed: int = 0
    mode: str = "sgqt-pure"
    target_rank: int = 2
    reference: str = "hidden"
    settings_per_objective: Optional[int] = None
    workers: int = 1

    def __post_init__(self):
        def positive_int(name):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v <= 0:
                raise ConfigError(f"must be a positive integer, got {v!r}", name)

        for name in ("trials", "iterations", "workers", "target_rank"):
            positive_int(name)
        positive_int("dimension")
        if self.dimension < 2:
            raise ConfigError("must be at least 2", "dimension")
        if self.regime not in REGIMES:
            raise ConfigError(f"must be one of {REGIMES}", "regime")
        if self.mode not in MODES:
            raise ConfigError(f"must be one of {MODES}", "mode")
        if self.reference not in REFERENCES:
            raise ConfigError(f"must be one of {REFERENCES}", "reference")
        if self.reference == "operational" and self.mode == "sgqt-mixed":
            raise ConfigError("operational reference is defined for pure-state modes only",
                              "reference")
        if not isinstance(self.master_seed, (int, np.integer)) or not 0 <= self.master_seed < 2**64:
            raise ConfigError("must be an unsigned 64-bit integer", "master_seed")
        if self.target_rank > self.dimension:
            raise ConfigError("cannot exceed dimension", "target_rank")
        for section, allowed in (("schedule", _SCHEDULE_KEYS), ("noise", _NOISE_KEYS),
                                 ("turbulence", _TURBULENCE_KEYS)):
            table = getattr(self, section)
            if not isinstance(table, dict):
                raise ConfigError("must be a table", section)
            for key in table:
                if key not in allowed:
                    raise ConfigError("unknown key", f"{section}.{key}")

    @classmethod
    def from_mapping(cls, data: dict, preset: Optional[str] = None) -> "RunConfig":
        """Build from nested or dotted-key mappings; preset values come first."""
        merged: dict = {}
        preset = preset or data.get("preset")
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}",
                                  "preset")
            _merge(merged, PRESETS[preset])
        _merge(merged, _nest({k: v for k, v in data.items() if k != "preset"}))
        known = {f.name for f in fields(cls)}
        for key in merged:
            if key not in known:
                raise ConfigError("unknown key", key)
        return cls(**merged)

    @classmethod
    def from_file(cls, path, preset: Optional[str] = None) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        return cls.from_mapping(data, preset)

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def override(self, key: str, value) -> "RunConfig":
        """Copy with one dotted key (``dimension``, ``noise.rate_hz``, ...) replaced."""
        data = asdict(self)
        _merge(data, _nest({key: value}))
        known = {f.name for f in fields(self)}
        if key.split(".")[0] not in known:
            raise ConfigError("unknown key", key)
        return RunConfig(**data)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _nest(flat: dict) -> dict:
    out: dict = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        if isinstance(value, dict):
            value = _nest(value)
        if isinstance(node.get(parts[-1]), dict) and isinstance(value, dict):
            _merge(node[parts[-1]], value)
        else:
            node[parts[-1]] = value
    return out


def _merge(into: dict, other: dict) -> dict:
    for k, v in other.items():
        if isinstance(v, dict) and isinstance(into.get(k), dict):
            _merge(into[k], v)
        elif isinstance(v, dict):
            into[k] = _merge({}, v)
        else:
            into[k] = v
    return into


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---- resolution -------------------------------------------------------------

@dataclass(frozen=True)
class ResolvedRun:
    """A RunConfig with every preset turned into concrete objects."""

    cfg: RunConfig
    noise: NoiseProfile
    schedule: GainSchedule
    turbulence: Optional[TurbulenceConfig]

    def describe(self) -> dict:
        noise = {f.name: getattr(self.noise, f.name) for f in fields(NoiseProfile)}
        turb = None if self.turbulence is None else asdict(self.turbulence)
        return _jsonable({"noise": noise, "schedule": asdict(self.schedule), "turbulence": turb})


def _noise_value(key, value, dim):
    if key == "crosstalk":
        if np.isscalar(value):
            return uniform_crosstalk(dim, float(value))
        c = np.asarray(value, dtype=float)
        if c.shape != (dim, dim):
            raise ConfigError(f"expected a scalar or a {dim}x{dim} matrix", "noise.crosstalk")
        return c
    if key == "loss":
        # a scalar is the transmission of the last mode in a linear ramp from 1
        if np.isscalar(value):
            return np.linspace(1.0, float(value), dim)
        eta = np.asarray(value, dtype=float).reshape(-1)
        if eta.size != dim:
            raise ConfigError(f"expected a scalar or {dim} transmissions", "noise.loss")
        return eta
    return value


def resolve(cfg: RunConfig) -> ResolvedRun:
    d = cfg.dimension
    if cfg.mode in ("baseline-mub", "compare") and not is_prime(d):
        raise UnsupportedDimensionError(
            f"MUB baseline needs a prime dimension, got {d}")
    if cfg.regime == "high-noise":
        base = high_noise(d)
    elif cfg.regime == "custom":
        base = NoiseProfile(rate_hz=1e5)
    else:
        base = low_noise(d)
    over = {k: _noise_value(k, v, d) for k, v in cfg.noise.items()}
    if "copies_per_setting" in over and "rate_hz" not in over:
        over["rate_hz"] = None
    if "rate_hz" in over and "copies_per_setting" not in over:
        over["copies_per_setting"] = None
    try:
        noise = base.with_(**over)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "noise") from exc
    if noise.copies < 1:
        raise ConfigError("fewer than one copy per setting", "noise")

    default = MIXED_SCHEDULE if cfg.mode == "sgqt-mixed" else REGIME_SCHEDULES[cfg.regime]
    try:
        schedule = replace(default, **{k: float(v) for k, v in cfg.schedule.items()})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), "schedule") from exc

    turb = None
    if cfg.regime == "turbulence" or (cfg.regime == "custom" and cfg.turbulence):
        try:
            turb = weak_turbulence(d, **cfg.turbulence)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "turbulence") from exc
    elif cfg.turbulence:
        raise ConfigError("turbulence settings need regime 'turbulence' or 'custom'",
                          "turbulence")
    return ResolvedRun(cfg, noise, schedule, turb)


# ---- trials -------------------------------------------------------------------

def trial_streams(master_seed: int, trial: int) -> dict[str, np.random.Generator]:
    """Independent generators for target, algorithm, oracle and baseline oracle."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(trial,))
    names = ("target", "algorithm", "oracle", "baseline")
    return {n: np.random.default_rng(s) for n, s in zip(names, ss.spawn(len(names)))}


def operational_reference(oracle: MeasurementOracle) -> Ket:
    """Ket maximizing the noiseless expected count, i.e. where SGQT converges.

    With loss and crosstalk this differs from the prepared state. It is
    found by quasi-Newton ascent started from the prepared state (or its
    dominant eigenvector).
    """
    ev = oracle.evaluation
    st = ev.true_state
    if isinstance(st, Ket):
        start = st.amps
    else:
        start = np.linalg.eigh(st.elements)[1][:, -1]
    d = oracle.dim

    def neg(x):
        v = x[:d] + 1j * x[d:]
        v = v / np.linalg.norm(v)
        return -ev.expected_probability(v)

    res = minimize(neg, np.concatenate([start.real, start.imag]), method="BFGS",
                   options={"gtol": 1e-12, "maxiter": 2000})
    v = res.x[:d] + 1j * res.x[d:]
    return Ket(v / np.linalg.norm(v))


def checkpoints(iterations: int, copies_per_query: int, n_settings: int,
                count: int = 8) -> np.ndarray:
    """Roughly log-spaced iteration indices where the baseline is evaluated.

    Each index k is chosen so the SGQT budget 2 N (k+1) splits evenly over
    the ``n_settings`` MUB projectors, making both budgets exactly equal.
    """
    step = n_settings // gcd(2 * copies_per_query, n_settings)
    target = np.geomspace(1, iterations, count)
    m = np.maximum(1, np.round(target / step)).astype(int)
    ks = np.unique(m * step - 1)
    ks = ks[ks < iterations]
    if ks.size == 0:
        raise ConfigError(f"need at least {step} iterations for an equal-budget baseline",
                          "iterations")
    return ks


def baseline_infidelities(oracle: MeasurementOracle, reference: Ket, sgqt_copies_per_query: int,
                          ks: Sequence[int]) -> np.ndarray:
    """MUB + MLE + pure projection at the copy budget SGQT used up to each k."""
    d = oracle.dim
    mubs = build_mubs(d)
    out = []
    for k in ks:
        total = 2 * sgqt_copies_per_query * (k + 1)
        data = acquire_tomogram(oracle, mubs, total // len(mubs))
        if data.total_copies != total:
            raise SGQTError(f"baseline used {data.total_copies} copies, SGQT {total}")
        est = project_pure(mle_reconstruct(data))
        out.append(1.0 - fidelity(reference, est))
    return np.array(out)


def plan_checkpoints(plan: ResolvedRun) -> np.ndarray:
    d = plan.cfg.dimension
    return checkpoints(plan.cfg.iterations, plan.noise.copies, d * (d + 1))


@dataclass
class TrialResult:
    trial: int
    infidelity: np.ndarray
    copies: np.ndarray
    wall_time_s: float
    baseline: Optional[np.ndarray] = None

    @property
    def final_fidelity(self) -> float:
        return float(1.0 - self.infidelity[-1])

    @property
    def copies_used(self) -> int:
        return int(self.copies[-1])


def _channel(plan: ResolvedRun):
    if plan.turbulence is None:
        return None
    return TurbulenceChannel(plan.turbulence, dim=plan.cfg.dimension)


def run_trial(plan: ResolvedRun, trial: int) -> TrialResult:
    """One trial of ``plan``; any exception becomes a TrialFailure."""
    cfg = plan.cfg
    try:
        return _run_trial(plan, trial)
    except TrialFailure:
        raise
    except Exception as exc:
        raise TrialFailure(trial, cfg.master_seed, f"{type(exc).__name__}: {exc}") from exc


def _run_trial(plan: ResolvedRun, trial: int) -> TrialResult:
    cfg = plan.cfg
    d = cfg.dimension
    rng = trial_streams(cfg.master_seed, trial)
    t0 = time.perf_counter()
    if cfg.mode == "sgqt-mixed":
        target = random_density_matrix(d, cfg.target_rank, rng["target"])
        oracle = MeasurementOracle(target, plan.noise, _channel(plan), rng["oracle"])
        _, records = run_sgqt_mixed(oracle, d, cfg.iterations, plan.schedule,
                                    cfg.settings_per_objective, rng["algorithm"])
        inf = np.array([1.0 - r.fidelity_true for r in records])
        copies = np.array([r.copies_used for r in records], dtype=np.int64)
        return TrialResult(trial, inf, copies, time.perf_counter() - t0)

    target = random_haar_ket(d, rng["target"])
    oracle = MeasurementOracle(target, plan.noise, _channel(plan), rng["oracle"])
    ref = operational_reference(oracle) if cfg.reference == "operational" else target
    ks = plan_checkpoints(plan)
    if cfg.mode == "baseline-mub":
        base = baseline_infidelities(oracle, ref, oracle.copies_per_query, ks)
        copies = 2 * oracle.copies_per_query * (ks + 1)
        return TrialResult(trial, base, copies.astype(np.int64), time.perf_counter() - t0)

    _, tr = run_sgqt(oracle, d, cfg.iterations, plan.schedule, rng["algorithm"], reference=ref)
    inf = 1.0 - tr.fidelities
    base = None
    if cfg.mode == "compare":
        b_oracle = MeasurementOracle(target, plan.noise, _channel(plan), rng["baseline"])
        base = baseline_infidelities(b_oracle, ref, oracle.copies_per_query, ks)
    return TrialResult(trial, inf, tr.copies, time.perf_counter() - t0, base)


# ---- aggregation ----------------------------------------------------------------

@dataclass
class QuantileTrace:
    k: np.ndarray
    q25: np.ndarray
    median: np.ndarray
    q75: np.ndarray
    copies: np.ndarray

    @classmethod
    def from_samples(cls, k, samples: np.ndarray, copies) -> "QuantileTrace":
        q = np.quantile(np.asarray(samples, dtype=float), [0.25, 0.5, 0.75], axis=0)
        return cls(np.asarray(k), q[0], q[1], q[2], np.asarray(copies, dtype=np.int64))

    def __len__(self):
        return len(self.k)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "q25", "median", "q75", "copies"])
            for row in zip(self.k, self.q25, self.median, self.q75, self.copies):
                w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])),
                            repr(float(row[3])), int(row[4])])

    @classmethod
    def from_csv(cls, path) -> "QuantileTrace":
        with open(path, encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda name, t: np.array([t(r[name]) for r in rows])
        return cls(col("k", int), col("q25", float), col("median", float), col("q75", float),
                   col("copies", int))


@dataclass
class EnsembleResult:
    plan: ResolvedRun
    trace: QuantileTrace
    trials: list[TrialResult]
    baseline: Optional[QuantileTrace] = None

    @property
    def infidelities(self) -> np.ndarray:
        """Per-trial infidelity, shape (trials, rows)."""
        return np.array([t.infidelity for t in self.trials])

    @property
    def final_fidelities(self) -> np.ndarray:
        return np.array([t.final_fidelity for t in self.trials])

    def crossing_iterations(self, threshold: float = 0.99) -> np.ndarray:
        """Per trial, the first iteration (1-based) whose fidelity exceeds ``threshold``.

        Trials that never cross get NaN.
        """
        out = []
        for t in self.trials:
            hit = np.nonzero(1.0 - t.infidelity > threshold)[0]
            out.append(float(self.trace.k[hit[0]] + 1) if hit.size else np.nan)
        return np.array(out)

    def summary(self) -> dict:
        cfg = self.plan.cfg
        tr = self.trace
        out = {
            "config": cfg.to_dict(),
            "resolved": self.plan.describe(),
            "final": {"k": int(tr.k[-1]), "q25": float(tr.q25[-1]),
                      "median": float(tr.median[-1]), "q75": float(tr.q75[-1]),
                      "copies": int(tr.copies[-1])},
            "seeds": {"master_seed": int(cfg.master_seed),
                      "derivation": "SeedSequence(master_seed, spawn_key=(trial,)).spawn(4)",
                      "trials": list(range(cfg.trials))},
            "trials": [{"trial": t.trial, "final_fidelity": t.final_fidelity,
                        "copies_used": t.copies_used} for t in self.trials],
            "versions": versions(),
        }
        if self.baseline is not None:
            out["comparison"] = comparison_rows(self)
        return out


def versions() -> dict:
    from . import __version__
    return {"sgqt": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _map_trials(plan: ResolvedRun, workers: int) -> list[TrialResult]:
    n = plan.cfg.trials
    job = partial(run_trial, plan)
    if workers <= 1 or n == 1:
        return [job(i) for i in range(n)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, range(n), chunksize=max(1, n // (4 * workers))))


def run_ensemble(cfg: RunConfig, workers: Optional[int] = None) -> EnsembleResult:
    """Run every trial of ``cfg`` and reduce to a quantile trace.

    Raises TrialFailure naming the trial (and master seed) of the first
    failure; results are ordered by trial index whatever the worker count.
    """
    plan = resolve(cfg)
    results = _map_trials(plan, workers or cfg.workers)
    for r in results:
        log.debug("trial %d: final fidelity %.6f, %d copies, %.3f s",
                  r.trial, r.final_fidelity, r.copies_used, r.wall_time_s)
    copies = results[0].copies
    if any(not np.array_equal(r.copies, copies) for r in results):
        raise SGQTError("trials consumed different copy budgets")
    if cfg.mode == "baseline-mub":
        k = plan_checkpoints(plan)
    else:
        k = np.arange(len(copies))
    trace = QuantileTrace.from_samples(k, [r.infidelity for r in results], copies)
    baseline = None
    if cfg.mode == "compare":
        ks = plan_checkpoints(plan)
        baseline = QuantileTrace.from_samples(ks, [r.baseline for r in results], copies[ks])
    return EnsembleResult(plan, trace, results, baseline)


def comparison_rows(result: EnsembleResult) -> list[dict]:
    """SGQT vs baseline median infidelity at matching copy budgets."""
    b = result.baseline
    t = result.trace
    rows = []
    for i, k in enumerate(b.k):
        s_med = float(t.median[k])
        b_med = float(b.median[i])
        rows.append({"k": int(k), "copies": int(b.copies[i]), "sgqt_median": s_med,
                     "baseline_median": b_med,
                     "ratio": b_med / s_med if s_med > 0 else float("inf")})
    return rows


def compare_budgets(cfg: RunConfig, workers: Optional[int] = None) -> EnsembleResult:
    """SGQT and MUB tomography on the same targets and noise with equal copy budgets."""
    if cfg.mode != "compare":
        raise ConfigError("compare_budgets needs mode 'compare'", "mode")
    return run_ensemble(cfg, workers)


def sweep(cfg: RunConfig, key: str, values: Sequence, workers: Optional[int] = None):
    """Run the ensemble once per value of a dotted config key."""
    return [(v, run_ensemble(cfg.override(key, v), workers)) for v in values]


# ---- output -----------------------------------------------------------------------

def write_outputs(result: EnsembleResult, out_dir, stem: str = "run") -> list[Path]:
    """Write ``<stem>_trace.csv`` and ``<stem>_summary.json`` (plus the baseline trace).

    Nothing machine-dependent such as wall time is written, so reruns with
    the same seed reproduce the files byte for byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}_trace.csv", out / f"{stem}_summary.json"]
    result.trace.to_csv(paths[0])
    with open(paths[1], "w", encoding="utf-8") as fh:
        json.dump(result.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if result.baseline is not None:
        p = out / f"{stem}_baseline_trace.csv"
        result.baseline.to_csv(p)
        paths.append(p)
    return paths


def write_sweep(results, key: str, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([key, "q25", "median", "q75", "copies"])
        for value, res in results:
            tr = res.trace
            w.writerow([value, repr(float(tr.q25[-1])), repr(float(tr.median[-1])),
                        repr(float(tr.q75[-1])), int(tr.copies[-1])])
    for value, res in results:
        write_outputs(res, out, stem=f"{key.replace('.', '_')}={value}")
    return path
