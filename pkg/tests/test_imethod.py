import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from randblowup.evolve import conserved
from randblowup.imethod import (IMultiplierSpec, N_policy, almost_conservation_report, apply_I, apply_J,
                                modified_energy, norm_equivalence, save_report, xi_quantity)
from randblowup.imethod import _fit_exponent
from randblowup.spectral import ComplexField, field_from_function, make_grid


def random_field(grid, seed, decay=1.0):
    rng = np.random.default_rng(seed)
    fh = (rng.normal(size=(grid.n, grid.n)) + 1j * rng.normal(size=(grid.n, grid.n))) / (1 + grid.ksq) ** decay
    return ComplexField(grid, np.fft.ifft2(fh, norm="ortho"))


def test_multiplier_branches():
    sp = IMultiplierSpec(N=4.0, s=0.3)
    rho = np.array([0.0, 0.5, 1.0, 2.0, 3.0, 10.0])
    m = sp.m(rho * 4.0)
    assert np.allclose(m[:3], 1.0)
    assert np.allclose(m[3:], rho[3:] ** (0.3 - 1), rtol=1e-14)


def test_multiplier_smooth_and_monotone():
    sp = IMultiplierSpec(N=1.0, s=0.1)
    tau = np.linspace(-0.5, np.log(2) + 0.5, 20001)
    g = np.log(sp.m(np.exp(tau)))
    assert np.all(np.diff(g) <= 1e-15)
    # second differences of ln m in ln rho stay bounded across the joins (C^2 blend)
    h = tau[1] - tau[0]
    d2 = np.diff(g, 2) / h**2
    assert np.max(np.abs(np.diff(d2))) < 1e-2


@pytest.mark.parametrize("kw", [dict(N=0.5), dict(N=2.0, s=0.0), dict(N=2.0, s=1.0)])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        IMultiplierSpec(**kw)


def test_I_plus_J_is_identity():
    g = make_grid(64, 6.0)
    f = random_field(g, 1)
    sp = IMultiplierSpec(N=3.0)
    tot = apply_I(f, sp).spectral().values + apply_J(f, sp).spectral().values
    assert np.max(np.abs(tot - f.spectral().values)) < 1e-14


def test_unresolved_N_is_rejected():
    g = make_grid(32, 8.0)  # Nyquist ~ 6.3
    with pytest.raises(ValueError):
        apply_I(random_field(g, 0), IMultiplierSpec(N=4.0))


def test_I_is_identity_on_low_frequencies():
    g = make_grid(64, np.pi)
    f = field_from_function(g, lambda x, y: np.exp(1j * x) + 0.5 * np.exp(-2j * y))
    sp = IMultiplierSpec(N=3.0)
    assert (apply_I(f, sp) - f).norm() < 1e-13
    assert modified_energy(f, sp).E == pytest.approx(conserved(f).E, rel=1e-13)
    assert xi_quantity(f, 0.5, sp) < 1e-25


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), N=st.floats(1.0, 10.0), s=st.floats(0.05, 0.95),
       decay=st.floats(0.0, 2.0))
def test_norm_equivalence(seed, N, s, decay):
    g = make_grid(64, 2.0)  # Nyquist ~ 50
    res = norm_equivalence(random_field(g, seed, decay), IMultiplierSpec(N=N, s=s))
    assert res.holds
    assert res.lhs <= res.mid * (1 + 1e-12)


def test_N_policy():
    assert N_policy(0.1, 0.05) == pytest.approx(0.1 ** -1.05)
    assert N_policy(2.0) == 1.0


def test_exponent_fit_recovers_power_law():
    inv = np.geomspace(2, 40, 30)
    fit = _fit_exponent(inv, 3.0 * inv**1.5, 2.0, 1.5)
    assert fit.exponent == pytest.approx(1.5, abs=1e-10)
    assert fit.ok and fit.r2 == pytest.approx(1.0)
    assert _fit_exponent(inv, 3.0 * inv**2.5, 2.0, 1.5).ok is False


def test_exponent_fit_edge_cases():
    inv = np.geomspace(2, 40, 30)
    below = _fit_exponent(inv, np.full(30, 1e-14), 1.0, 1.5, floor=1e-12)
    assert below.ok is True and "roundoff" in below.note
    narrow = _fit_exponent(np.linspace(2, 2.5, 10), np.linspace(1, 2, 10), 1.0, 1.5)
    assert narrow.ok is None


def test_report_on_shrinking_gaussian(tmp_path):
    g = make_grid(128, 6.0)
    lams = np.geomspace(1.0, 0.25, 8)
    fields = [field_from_function(g, lambda x, y, l=l: np.exp(-(x**2 + y**2) / (2 * l * l)) / l) for l in lams]
    rep = almost_conservation_report(np.arange(8.0), lams, fields, fields[0])
    assert rep.momentum_fit.ok is True  # real fields carry no momentum
    assert np.all(rep.N >= 1) and rep.energy_fit.n == 8
    save_report(rep, tmp_path)
    summary = json.loads((tmp_path / "imethod.json").read_text())
    assert summary["n"] == 8 and (tmp_path / "imethod.csv").exists()
