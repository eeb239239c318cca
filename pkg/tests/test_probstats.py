import json

import numpy as np
import pytest
from scipy import special

from randblowup.probstats import (BilinearRow, EnsembleConfig, annulus_project, bilinear_norm, bilinear_ratio_scan,
                                  bilinear_slope, exceedance, large_dev_moments, lattice_gaussians,
                                  linf_gaussian_check, run_ensemble, save_ensemble, strichartz_norm, tail_fit,
                                  trilinear_statistic)
from randblowup.randomize import gaussians, make_profile, zero_spec
from randblowup.spectral import ComplexField, field_from_function, make_grid


def bump(grid, k=(0.0, 0.0), width=0.5):
    return field_from_function(grid, lambda x, y: np.exp(-(x**2 + y**2) / (2 * width**2) + 1j * (k[0] * x + k[1] * y)))


def test_strichartz_q2_r2_is_unitary():
    g = make_grid(64, 6.0)
    f = bump(g, (1.0, -2.0))
    assert strichartz_norm(f, 2, 2) == pytest.approx(f.norm(), rel=1e-12)
    assert strichartz_norm(f, 2, 2, (0.0, 0.25)) == pytest.approx(0.5 * f.norm(), rel=1e-12)


def test_strichartz_plane_wave_closed_form():
    g = make_grid(32, np.pi)
    f = field_from_function(g, lambda x, y: np.exp(1j * (3 * x + y)))
    # |e^{it Lap} f| = 1, so ||.||_{L^r} = (4 pi^2)^{1/r} for every t
    assert strichartz_norm(f, 4, 6) == pytest.approx((4 * np.pi**2) ** (1 / 6), rel=1e-12)


def test_strichartz_homogeneity_and_validation():
    g = make_grid(64, 6.0)
    f = bump(g)
    assert strichartz_norm(f.scale(3j), 4, 4) == pytest.approx(3 * strichartz_norm(f, 4, 4), rel=1e-12)
    with pytest.raises(ValueError):
        strichartz_norm(f, 1, 4)
    with pytest.raises(ValueError):
        strichartz_norm(f, 4, 4, (0.5, 1.5))


def test_scalar_gaussian_tail():
    # |g|^2 ~ Exp(1) for standard complex g, so P(|g| > K) = exp(-K^2)
    x = np.abs(gaussians(11, 20000))
    fit = tail_fit(x)
    assert fit.model == "K2" and fit.r2 > 0.99
    assert fit.c == pytest.approx(1.0, rel=0.1)
    K = np.array([0.5, 1.0, 1.5])
    assert np.allclose(exceedance(x, K), np.exp(-K**2), atol=0.01)


def test_tail_fit_degenerate_and_small():
    assert tail_fit(np.ones(500)).degenerate
    with pytest.raises(ValueError):
        tail_fit(np.arange(50.0))


def test_exceedance_is_nonincreasing(rng):
    x = rng.exponential(size=1000)
    P = exceedance(x, np.linspace(0, 5, 100))
    assert np.all(np.diff(P) <= 0) and P[0] == 1.0


def test_linf_weighted_tail():
    G, nn = lattice_gaussians(range(1000), 6)
    fit, X = linf_gaussian_check(G, nn, 2.0)
    assert fit.model == "K2" and fit.r2 > 0.95
    assert len(X) == 1000
    with pytest.raises(ValueError):
        linf_gaussian_check(G, nn, 0.0)


def test_trilinear_tail_prefers_two_thirds_power(rng):
    n = 6
    coeff = rng.normal(size=(n, n, n)) + 1j * rng.normal(size=(n, n, n))
    G = np.stack([gaussians(s, n) for s in range(4000)])
    stat = np.abs(trilinear_statistic(G, coeff))
    fit = tail_fit(stat / np.sqrt(np.mean(stat**2)))
    assert fit.model == "K2/3"
    assert fit.alternatives["K2/3"]["r2"] > fit.alternatives["K2"]["r2"]


def test_trilinear_statistic_matches_loop(rng):
    c = rng.normal(size=(3, 3, 3)) + 0j
    g = gaussians(5, 3)[None, :]
    ref = sum(c[i, j, k] * g[0, i] * np.conj(g[0, j]) * g[0, k] for i in range(3) for j in range(3) for k in range(3))
    assert trilinear_statistic(g, c)[0] == pytest.approx(ref, rel=1e-12)


def test_large_deviation_moments_match_gaussian_oracle():
    c = np.array([1.0, 0.5, 0.25j, 0.1])
    rhos = [2, 4, 6, 8]
    res = large_dev_moments(c, rhos, 100000, seed=3)
    exact = [special.gamma(1 + r / 2) ** (1 / r) * np.linalg.norm(c) for r in rhos]
    assert np.allclose(res["exact"], exact, rtol=1e-12)
    assert np.allclose(res["empirical"], exact, rtol=0.03)
    assert res["max_ratio_to_sqrt_rho"] <= 1.0


@pytest.mark.xfail(strict=True, reason="for Gaussian sums the log-log slope of the L^rho norm over rho in [2, 16] "
                                       "is 0.32; the sqrt(rho) growth is only asymptotic")
def test_large_deviation_exponent_band():
    res = large_dev_moments(np.ones(8) / np.sqrt(8), [2, 4, 8, 16], 20000)
    assert 0.4 <= res["exponent_empirical"] <= 0.6


def test_bilinear_norm_against_constant():
    # e^{it Lap} c = c, so the bilinear norm reduces to |c| ||f|| sqrt(T)
    g = make_grid(64, 6.0)
    f = bump(g, (2.0, 0.0))
    const = ComplexField(g, np.full((64, 64), 2.0 + 0j))
    assert bilinear_norm(f, const, (0.0, 0.5), 16) == pytest.approx(2 * f.norm() * np.sqrt(0.5), rel=1e-12)


def test_annulus_projection_errors():
    g = make_grid(32, 8.0)  # Nyquist ~ 6.3
    f = bump(g)
    with pytest.raises(ValueError):
        annulus_project(f, 4.0)
    with pytest.raises(ValueError):
        annulus_project(f, 0.01)
    p = annulus_project(f, 1.0)
    k = np.sqrt(g.ksq)
    assert np.max(np.abs(p.spectral().values[(k < 1) | (k >= 2)])) < 1e-15 * f.norm()


def test_bilinear_scan_zero_denominator():
    g = make_grid(64, 8.0)
    zero = ComplexField(g, np.zeros((64, 64), complex))
    with pytest.raises(ZeroDivisionError):
        bilinear_ratio_scan(bump(g, width=0.2), zero, [2.0], [1.0], n_times=4)


def test_bilinear_slope_of_synthetic_rows():
    rows = [BilinearRow(N, M, 0.0, (N / M) ** 0.25) for N in (4, 8, 16) for M in (1, 2, 4) if M <= N]
    assert bilinear_slope(rows) == pytest.approx(0.25, abs=1e-12)
    with pytest.raises(ValueError):
        bilinear_slope([BilinearRow(4, 4, 0.0, 1.0)])


def ens_cfg(spec, **kw):
    return EnsembleConfig(spec, make_grid(32, 4.0), n_samples=kw.pop("n_samples", 20),
                          observables=("l2sq", "linf", "strichartz", "linf_weighted_g"), n_times=8, **kw)


def test_zero_spec_ensemble():
    res = run_ensemble(ens_cfg(zero_spec(5)))
    assert not res.errors
    for name in ("l2sq", "linf", "strichartz"):
        assert np.all(res.values[name] == 0)
    assert res.nu == 0


def test_ensemble_determinism_and_workers(tmp_path):
    cfg = ens_cfg(make_profile("log-corrected", 5), seed_base=2**64 - 5)
    a, b = run_ensemble(cfg), run_ensemble(cfg, workers=3)
    assert a.seeds[-1] == 14  # wraps modulo 2^64
    for name in cfg.observables:
        assert np.array_equal(a.values[name], b.values[name])
    out = save_ensemble(a, tmp_path, fits={"l2sq": {"c": 1.0}})
    assert out.name == f"ensemble_{cfg.config_hash()}"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["stats"]["l2sq"]["n"] == 20 and summary["fits"]["l2sq"]["c"] == 1.0
    lines = (out / "samples.csv").read_text().splitlines()
    assert len(lines) == 21 and lines[0].startswith("seed,")


def test_ensemble_records_sample_errors():
    # K_max beyond the grid's resolvable range fails on every sample without aborting
    res = run_ensemble(ens_cfg(make_profile("log-corrected", 12), n_samples=3))
    assert len(res.errors) == 3
    assert np.all(np.isnan(res.values["l2sq"]))


def test_ensemble_config_validation():
    with pytest.raises(ValueError):
        ens_cfg(zero_spec(4), n_samples=0)
    with pytest.raises(ValueError):
        EnsembleConfig(zero_spec(4), make_grid(32, 4.0), observables=("bogus",))
