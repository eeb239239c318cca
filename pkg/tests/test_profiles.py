import numpy as np
import pytest

from randblowup.profiles import (GammaBracketError, Lambda, R_b, R_b_minus, bclose_error, compute_Gamma_b,
                                 continuation, estimate_Gamma_b, flux, flux_direct, gamma_bracket,
                                 ground_state_residual, make_Qb_tilde, make_zeta_tilde, profile_diagnostics,
                                 radial_energy, radial_gradient_sq, radial_mass, radial_pair, solve_ground_state,
                                 solve_Qb, solve_zeta_b, theta_weight)
from randblowup.radial import load_profile, profile_hash, save_profile

# Independent oracles, frozen: a coarse solve_ivp shooting on Q(0) with
# bisection, and a variation-of-parameters solve_ivp integration of the tail
# equation with the same outgoing asymptotic condition.
Q0_ORACLE = 2.2062008646505
MASS_ORACLE = 11.700896524557846
GAMMA_ORACLE = {0.1: 5.6911e-12, 0.15: 1.3433e-07, 0.2: 1.9014e-05}
EXCESS_ORACLE = {0.05: 0.008736, 0.1: 0.035595, 0.15: 0.082763, 0.2: 0.154838}


@pytest.fixture(scope="module")
def bset(q):
    qbs = continuation([0.05, 0.1, 0.15, 0.2], q=q)
    out = {}
    for b, qb in qbs.items():
        qt, psi = make_Qb_tilde(qb)
        out[b] = {"qb": qb, "qt": qt, "psi": psi}
    for b in (0.1, 0.15, 0.2):
        out[b]["zeta"] = solve_zeta_b(out[b]["qb"])
    return out


def test_ground_state_matches_shooting_oracle(q):
    assert q.evaluate(np.array([0.0]))[0].real == pytest.approx(Q0_ORACLE, rel=1e-9)
    assert radial_mass(q) == pytest.approx(MASS_ORACLE, rel=1e-9)


def test_ground_state_residual_and_shape(q):
    assert np.max(np.abs(ground_state_residual(q))) < 1e-10
    r = np.linspace(0, q.r_max, 500)
    v = q.evaluate(r)
    assert np.max(np.abs(v.imag)) == 0
    assert np.all(np.diff(v.real) < 0)
    assert abs(q.evaluate(np.array([0.0]), 1)[0]) < 1e-8
    assert np.max(v.real * np.exp(r / 2)) < 10


def test_ground_state_zero_energy_and_pohozaev(q):
    assert abs(radial_energy(q)) < 1e-8
    assert radial_gradient_sq(q) == pytest.approx(radial_mass(q), rel=1e-9)


def test_ground_state_node_doubling(q):
    q2 = solve_ground_state(m=1024, tol=1e-9)
    assert radial_mass(q2) == pytest.approx(radial_mass(q), rel=1e-8)
    assert q2.evaluate(np.array([0.0]))[0].real == pytest.approx(q.evaluate(np.array([0.0]))[0].real, rel=1e-8)


def test_lambda_is_antisymmetric_on_real_profiles(q):
    assert abs(radial_pair(q, q, f_op=Lambda)) < 1e-10


def test_theta_weight_values():
    assert theta_weight(np.array([0.0, 2.0, 4.0])) == pytest.approx([0.0, np.pi / 2, np.pi])
    with pytest.raises(ValueError):
        theta_weight(np.array([-1.0]))


@pytest.mark.parametrize("b", [0.05, 0.1, 0.15, 0.2])
def test_qb_boundary_condition_and_positivity(bset, b):
    qb = bset[b]["qb"]
    assert abs(qb.evaluate(np.array([R_b(b)]))[0]) < 1e-12
    r = np.linspace(0, 0.999 * R_b(b), 400)
    p = qb.evaluate(r) * np.exp(1j * b * r * r / 4)
    assert np.max(np.abs(p.imag)) < 1e-8 * np.max(np.abs(p))
    assert np.all(p.real[p.real.size // 2:] > -1e-12)


def test_mass_excess_matches_oracle_and_scales_like_b2(bset, q):
    ratios = []
    for b, ref in EXCESS_ORACLE.items():
        ex = radial_mass(bset[b]["qt"]) - radial_mass(q)
        assert ex == pytest.approx(ref, rel=1e-4)
        ratios.append(ex / b**2)
    assert max(ratios) / min(ratios) < 2


def test_qb_close_to_q_for_small_b(q):
    qb = solve_Qb(1e-3, q=q)
    assert bclose_error(qb, q) < 1e-3


def test_qb_tilde_vanishes_outside_and_psi_is_localized(bset):
    b = 0.15
    qt, psi = bset[b]["qt"], bset[b]["psi"]
    assert np.max(np.abs(qt.evaluate(np.linspace(R_b(b), R_b(b) + 5, 50)))) == 0
    inside = np.linspace(0.0, 0.99 * R_b_minus(b), 300)
    assert np.max(np.abs(psi.evaluate(inside))) < 1e-9


def test_gamma_matches_independent_oracle(bset):
    for b, ref in GAMMA_ORACLE.items():
        est = estimate_Gamma_b(bset[b]["zeta"])
        assert est.plateau_variation < 0.05
        assert est.gamma == pytest.approx(ref, rel=1e-3)
    g = [GAMMA_ORACLE[b] for b in (0.1, 0.15, 0.2)]
    assert g[0] < g[1] < g[2]


def test_gamma_halving_ratio(bset):
    ratio = np.log(GAMMA_ORACLE[0.1]) / np.log(GAMMA_ORACLE[0.2])
    assert ratio == pytest.approx(2.0, rel=0.2)
    assert np.log(estimate_Gamma_b(bset[0.1]["zeta"]).gamma) / np.log(
        estimate_Gamma_b(bset[0.2]["zeta"]).gamma) == pytest.approx(ratio, rel=1e-3)


def test_gamma_bracket_is_enforced_strictly(bset):
    # The asymptotic bracket does not hold at b = 0.2 with C = 10, eta = 0.01.
    lo, hi = gamma_bracket(0.2)
    assert not lo <= GAMMA_ORACLE[0.2] <= hi
    with pytest.raises(GammaBracketError):
        compute_Gamma_b(bset[0.2]["zeta"])
    assert compute_Gamma_b(bset[0.2]["zeta"], strict=False) > 0


def test_flux_far_field_constant(bset):
    # With the cutoff outside the core (A/2 > R_b) the flux constant is pi.
    b = 0.15
    zt, F = make_zeta_tilde(bset[b]["zeta"], bset[b]["psi"], a=0.2)
    g = estimate_Gamma_b(bset[b]["zeta"]).gamma
    fl = flux(zt, F)
    assert fl > 0
    assert fl / g == pytest.approx(3.204, rel=1e-2)  # regression lock
    assert fl / g == pytest.approx(np.pi, rel=0.03)
    assert flux_direct(zt, F) == pytest.approx(fl, rel=1e-8)


def test_zeta_tilde_mass_bound_and_cutoff_radius(bset):
    b = 0.15
    z = bset[b]["zeta"]
    zt, F = make_zeta_tilde(z, bset[b]["psi"])
    g = estimate_Gamma_b(z).gamma
    assert radial_mass(zt) <= g ** (1 - 0.1)
    with pytest.raises(ValueError):
        make_zeta_tilde(z, bset[b]["psi"], a=5.0)


def test_diagnostics_radial_momentum_and_excess(bset, q):
    b = 0.15
    zt, F = make_zeta_tilde(bset[b]["zeta"], bset[b]["psi"])
    d = profile_diagnostics(bset[b]["qt"], zt, q, bset[b]["zeta"], F)
    assert max(abs(d.momentum[0]), abs(d.momentum[1])) < 1e-12
    assert d.mass_excess > 0 and d.gamma_b > 0
    # both readings of the gradient bound, recorded
    assert d.grad_zeta_l2 <= d.gamma_b ** ((1 - 0.1) / 2)


def test_profile_text_roundtrip(tmp_path, q):
    h = save_profile(q, tmp_path / "q.txt")
    back = load_profile(tmp_path / "q.txt")
    assert profile_hash(back) == h == profile_hash(q)
    r = np.linspace(0, 10, 50)
    assert np.max(np.abs(back.evaluate(r) - q.evaluate(r))) < 1e-14


def test_solve_qb_rejects_out_of_range(q):
    with pytest.raises(ValueError):
        solve_Qb(0.35, q=q)


def test_qb_tilde_energy_bounded_by_gamma_power(bset):
    b = 0.15
    g = estimate_Gamma_b(bset[b]["zeta"]).gamma
    assert abs(radial_energy(bset[b]["qt"])) <= g ** (1 - 10 * 0.01)
