"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""
import time

import numpy as np
import pytest

from sgqt.bench import RunConfig, compare_budgets, run_ensemble, write_outputs
from sgqt.mub import build_mubs
from sgqt.oracle import MeasurementOracle, NoiseProfile
from sgqt.qstate import Ket, fixed_order_labels, random_haar_ket
from sgqt.spsa import CountPair, estimate_gradient, perturb, sample_direction
from sgqt.turbulence import (
    STRUCTURE_COEFF,
    ModeBasis,
    PhaseScreen,
    ScreenGenerator,
    beam_radius,
    fried_parameter,
    weak_turbulence,
    structure_function,
)


def _timed(cfg):
    t0 = time.perf_counter()
    res = run_ensemble(cfg)
    return res, time.perf_counter() - t0


def _cfg(preset, **kw):
    return RunConfig.from_mapping(kw, preset)


@pytest.fixture(scope="module")
def low_d3():
    return _timed(_cfg("low-noise", dimension=3, trials=200, iterations=100))


@pytest.fixture(scope="module")
def low_d5():
    return _timed(_cfg("low-noise", dimension=5, trials=200, iterations=200))


@pytest.fixture(scope="module")
def low_d20():
    return _timed(_cfg("low-noise", dimension=20, trials=100, iterations=600))


def _convergence(criterion, name, run, gate, limit_s):
    res, dt = run
    med = float(np.median(res.final_fidelities))
    criterion(name, med >= gate and dt < limit_s,
              f"median fidelity {med:.5f} (need >= {gate}), {dt:.1f} s (limit {limit_s} s)")


def test_c1_low_noise_d3(criterion, low_d3):
    _convergence(criterion, "1 low-noise d=3", low_d3, 0.998, 60)


def test_c2_low_noise_d5(criterion, low_d5):
    _convergence(criterion, "2 low-noise d=5", low_d5, 0.998, 120)


def test_c3_low_noise_d20(criterion, low_d20):
    _convergence(criterion, "3 low-noise d=20", low_d20, 0.98, 600)


def test_c4_crossing_iterations(criterion, low_d3, low_d5, low_d20):
    ref = {3: 29, 5: 62, 20: 566}
    parts, ok = [], True
    for d, (res, _) in zip((3, 5, 20), (low_d3, low_d5, low_d20)):
        cross = res.crossing_iterations(0.99)
        med = float(np.median(np.where(np.isnan(cross), np.inf, cross)))
        ok &= ref[d] / 2 <= med <= ref[d] * 2
        parts.append(f"d={d}: {med:g} (ref {ref[d]})")
    criterion("4 99% crossing", ok, ", ".join(parts))


@pytest.mark.parametrize("preset,d,iterations,gate", [
    ("high-noise-d3d5", 3, 100, 0.975),
    ("high-noise-d3d5", 5, 200, 0.965),
    ("high-noise-d20", 20, 600, 0.93),
])
def test_c5_high_noise(criterion, preset, d, iterations, gate):
    res = run_ensemble(_cfg(preset, dimension=d, trials=100, iterations=iterations))
    med = float(np.median(res.final_fidelities))
    n = res.plan.noise.copies
    criterion(f"5 high-noise d={d} N={n}", med >= gate, f"median fidelity {med:.5f} (need >= {gate})")


def test_c6_turbulence(criterion):
    res = run_ensemble(_cfg("turbulence", dimension=3, trials=100, iterations=100))
    med = float(np.median(res.final_fidelities))
    decades = np.median(res.infidelities[:, [0, 9, 99]], axis=0)
    monotone = bool(np.all(np.diff(decades) < 0))

    cfg = weak_turbulence(3)
    gen = ScreenGenerator(cfg)
    rng = np.random.default_rng(6)
    r = beam_radius(cfg, 3)
    ext = np.array([PhaseScreen(s, fried_parameter(cfg), cfg.cell_m).aperture_extremum(r)
                    for s in gen.generate(rng, 1000)])
    inside = float(np.mean((ext >= np.pi / 10) & (ext <= 2 * np.pi / 5)))
    criterion("6 turbulence d=3", med >= 0.99 and monotone and inside >= 0.9,
              f"median fidelity {med:.5f} (need >= 0.99), decade medians "
              f"{np.array2string(decades, precision=4)} monotone={monotone}, "
              f"screens in [pi/10, 2pi/5]: {inside:.3f} (need >= 0.9)")


def test_c7_baseline_comparison(criterion):
    soft = {"low-noise": 15, "high-noise": 1.4, "turbulence": 5}
    ratios = {}
    ok = True
    for regime in soft:
        res = compare_budgets(_cfg("compare-loss", regime=regime, trials=100))
        rows = res.summary()["comparison"]
        ratios[regime] = rows[-1]["ratio"]
        if regime == "low-noise":
            base = np.array([r["baseline_median"] for r in rows])
            late = base[len(base) // 2:]
            # a plateau: positive and flat to within a factor 2 over the late checkpoints
            floor_ok = late.min() > 1e-3 and late.max() / late.min() < 2
            lower = rows[-1]["sgqt_median"] < rows[-1]["baseline_median"]
            ok = floor_ok and lower
            main = (f"baseline floor {late.min():.4f}, SGQT {rows[-1]['sgqt_median']:.2e} vs "
                    f"baseline {rows[-1]['baseline_median']:.2e} at {rows[-1]['copies']} copies")
    logged = ", ".join(f"{k} {v:.2f} (ref {soft[k]})" for k, v in ratios.items())
    criterion("7 baseline comparison d=3 with loss", ok, f"{main}; ratios {logged}")


@pytest.mark.parametrize("preset,gate", [("mixed-low-noise", 0.95), ("mixed-reduced", 0.93)])
def test_c8_mixed(criterion, preset, gate):
    res = run_ensemble(_cfg(preset, dimension=3, trials=48, target_rank=2))
    med = float(np.median(res.final_fidelities))
    criterion(f"8 mixed rank-2 {preset}", med >= gate,
              f"median Uhlmann fidelity {med:.4f} at {res.plan.cfg.iterations} iterations "
              f"(need >= {gate})")


def _gradient_cosine(d, n=10_000, beta=1e-3):
    rng = np.random.default_rng(100 + d)
    psi, sigma = random_haar_ket(d, rng), random_haar_ket(d, rng)
    oracle = MeasurementOracle(psi, NoiseProfile(copies_per_setting=10**9, shot_noise=False))
    acc = np.zeros(d, dtype=complex)
    for _ in range(n):
        delta = sample_direction(d, rng)
        plus, minus = perturb(sigma, beta, delta)
        acc += estimate_gradient(CountPair(oracle.query_counts(plus), oracle.query_counts(minus)),
                                 beta, delta)
    s = sigma.amps
    f = lambda v: abs(np.vdot(v / np.linalg.norm(v), psi.amps)) ** 2
    h = 1e-6
    fd = np.array([(f(s + h * e) - f(s - h * e)) / (2 * h) + 1j * (f(s + 1j * h * e) - f(s - 1j * h * e)) / (2 * h)
                   for e in np.eye(d)])
    tang = lambda v: v - s * np.vdot(s, v)
    u, v = tang(acc / n), tang(fd)
    u, v = np.concatenate([u.real, u.imag]), np.concatenate([v.real, v.imag])
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def test_c9_properties(criterion, tmp_path):
    results = {}
    results["gradient cosine"] = min(_gradient_cosine(d) for d in (3, 5))
    ok_grad = results["gradient cosine"] >= 0.95

    worst = 0.0
    for d in (2, 3, 5, 7, 11):
        bases = build_mubs(d).matrix().reshape(d + 1, d, d)
        for a in range(d + 1):
            for b in range(d + 1):
                ov = np.abs(bases[a].conj() @ bases[b].T) ** 2
                want = np.eye(d) if a == b else np.full((d, d), 1 / d)
                worst = max(worst, float(np.max(np.abs(ov - want))))
    results["MUB deviation"] = worst
    ok_mub = worst <= 1e-10

    psi = random_haar_ket(3, 0)
    o = MeasurementOracle(psi, NoiseProfile(copies_per_setting=80), rng=1)
    c = np.array([o.query_counts(psi) for _ in range(10_000)])
    results["dispersion"] = float(c.var() / c.mean())
    ok_poisson = 0.9 <= results["dispersion"] <= 1.1

    cfg = weak_turbulence(3)
    screens = ScreenGenerator(cfg).generate(np.random.default_rng(7), 1000)
    lags = np.arange(8, cfg.grid_size // 4 + 1, 4)
    theory = STRUCTURE_COEFF * (lags * cfg.cell_m / fried_parameter(cfg)) ** (5 / 3)
    dev = max(float(np.max(np.abs(structure_function(screens, lags, axis=a) / theory - 1)))
              for a in (-1, -2))
    results["structure fn deviation"] = dev
    ok_sf = dev <= 0.2

    gram = max(float(np.max(np.abs(ModeBasis(fixed_order_labels(d), weak_turbulence(d)).gram()
                                   - np.eye(d)))) for d in (3, 5, 20))
    results["Gram deviation"] = gram
    ok_gram = gram <= 1e-4

    run_cfg = RunConfig(dimension=3, trials=3, iterations=50, master_seed=2024)
    a = write_outputs(run_ensemble(run_cfg), tmp_path / "a")
    b = write_outputs(run_ensemble(run_cfg), tmp_path / "b")
    ok_replay = all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    results["replay identical"] = ok_replay

    detail = ", ".join(f"{k} {v:.3g}" if not isinstance(v, bool) else f"{k} {v}"
                       for k, v in results.items())
    criterion("9 property suite",
              ok_grad and ok_mub and ok_poisson and ok_sf and ok_gram and ok_replay, detail)
