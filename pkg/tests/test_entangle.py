import json
import math

import numpy as np
import pytest
from scipy import integrate, special

from hyperfrac import entangle as ent
from hyperfrac import geometry as geo
from hyperfrac import spectral as spc
from hyperfrac.errors import (
    DomainError,
    IllConditionedError,
    QuadratureError,
    SupportError,
)


def smooth_bump(r, lo, hi):
    r = np.asarray(r, dtype=float)
    x = (2.0 * r - lo - hi) / (hi - lo)
    out = np.zeros_like(r)
    inside = np.abs(x) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - x[inside] ** 2))
    return out


def sin2_bump(r, lo, hi):
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = (r > lo) & (r < hi)
    out[inside] = np.sin(np.pi * (r[inside] - lo) / (hi - lo)) ** 2
    return out


def gauss_pair(r, center, rate=1.0):
    # even in r, so the profile is smooth at the origin
    r = np.asarray(r, dtype=float)
    return np.exp(-rate * (r - center) ** 2) + np.exp(-rate * (r + center) ** 2)


@pytest.fixture(scope="module")
def grids3():
    return spc.RadialGrid.default(3), spc.SpectralGrid.default(3)


@pytest.fixture(scope="module")
def source3(grids3):
    rg, _ = grids3
    return spc.RadialFunction(rg, smooth_bump(rg.nodes, 1.0, 2.0))


@pytest.fixture(scope="module")
def profile_basis():
    return ent.decaying_profile_basis(8)


# ---------------------------------------------------------------------------
# decay weights
# ---------------------------------------------------------------------------

def test_decay_weight_values():
    w = ent.DecayWeight(gamma=1.0, n=2)
    assert ent.decay_weight_eval(geo.base_point(2), w) == pytest.approx(math.exp(-1.0))
    x = geo.polar_to_point(math.sqrt(3.0), np.array([1.0, 0.0]))
    assert ent.decay_weight_eval(x, w) == pytest.approx(math.exp(-2.0), rel=1e-12)
    assert ent.decay_weight_eval(0.0, w) == pytest.approx(math.exp(-1.0))


def test_decay_weight_monotone():
    w = ent.DecayWeight(gamma=1.5, n=3)
    r = np.linspace(0.0, 12.0, 60)
    vals = w.profile(r)
    assert np.all(np.diff(vals) < 0)


@pytest.mark.parametrize("gamma,n", [(1.0, 3), (0.5, 2), (0.0, 3), (-1.0, 2)])
def test_decay_weight_rate_threshold(gamma, n):
    with pytest.raises(DomainError):
        ent.DecayWeight(gamma=gamma, n=n)


def test_decay_weight_eval_rejects_negative_radius():
    w = ent.DecayWeight(gamma=2.0, n=3)
    with pytest.raises(DomainError):
        ent.decay_weight_eval(-0.5, w)


# ---------------------------------------------------------------------------
# compact-support pairing bound
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pairing_setup(grids3):
    rg, _ = grids3
    u = spc.RadialFunction(rg, sin2_bump(rg.nodes, 0.5, 2.5))
    p1 = spc.RadialFunction(rg, sin2_bump(rg.nodes, 1.0, 4.0))
    p2 = spc.RadialFunction(rg, np.exp(-2.6 * rg.nodes), decay_rate=2.6)
    p3 = spc.RadialFunction(rg, smooth_bump(rg.nodes, 0.0, 6.0))
    return u, [p1, p2, p3]


def test_pairing_bound_frozen(pairing_setup):
    u, probes = pairing_setup
    bound = ent.compact_support_decay_check(u, 2.0, probes)
    assert bound.constant == pytest.approx(341.066876053193, rel=1e-8)
    assert bound.ratios[1] == pytest.approx(24.87030804452303, rel=1e-8)
    assert bound.constant == max(bound.ratios)


def test_pairing_bound_probe_enrichment(pairing_setup):
    u, probes = pairing_setup
    first = ent.compact_support_decay_check(u, 2.0, probes[:1])
    full = ent.compact_support_decay_check(u, 2.0, probes)
    assert full.constant >= first.constant
    assert full.constant <= 1.5 * first.constant


def test_pairing_bound_homogeneous(pairing_setup):
    u, probes = pairing_setup
    base = ent.compact_support_decay_check(u, 2.0, probes)
    tripled = spc.RadialFunction(u.grid, 3.0 * u.values)
    scaled = ent.compact_support_decay_check(tripled, 2.0, probes)
    assert scaled.constant == pytest.approx(3.0 * base.constant, rel=1e-12)


def test_pairing_bound_zero_data(pairing_setup):
    u, probes = pairing_setup
    zero = spc.RadialFunction(u.grid, np.zeros_like(u.values))
    assert ent.compact_support_decay_check(zero, 2.0, probes).constant == 0.0


def test_pairing_bound_smoothness_sweep(grids3):
    # analytic probes keep the weighted Sobolev norms resolvable in the
    # default spectral window even at positive smoothness
    rg, _ = grids3
    u = spc.RadialFunction(rg, sin2_bump(rg.nodes, 0.5, 2.5))
    probes = [spc.RadialFunction(rg, gauss_pair(rg.nodes, 2.0)),
              spc.RadialFunction(rg, gauss_pair(rg.nodes, 0.0, 0.7))]
    c0 = ent.compact_support_decay_check(u, 2.0, probes).constant
    c1 = ent.compact_support_decay_check(u, 2.0, probes, smoothness=1.0).constant
    c2 = ent.compact_support_decay_check(u, 2.0, probes, smoothness=2.0).constant
    assert c0 == pytest.approx(372.614, rel=1e-3)
    assert c1 == pytest.approx(205.912, rel=1e-3)
    assert c2 == pytest.approx(100.202, rel=1e-3)
    assert c0 > c1 > c2


def test_pairing_bound_rejects_wide_support(grids3):
    rg, _ = grids3
    u = spc.RadialFunction(rg, np.exp(-rg.nodes))
    probe = spc.RadialFunction(rg, sin2_bump(rg.nodes, 1.0, 4.0))
    with pytest.raises(DomainError, match="supported"):
        ent.compact_support_decay_check(u, 2.0, [probe])


def test_pairing_bound_rejects_foreign_grid(pairing_setup):
    u, _ = pairing_setup
    other = spc.RadialGrid.default(3, num_panels=20, nodes_per_panel=6)
    probe = spc.RadialFunction(other, sin2_bump(other.nodes, 1.0, 4.0))
    with pytest.raises(DomainError, match="grid"):
        ent.compact_support_decay_check(u, 2.0, [probe])


# ---------------------------------------------------------------------------
# heat-trace profiles
# ---------------------------------------------------------------------------

def heat_trace_spectral(v, r_x, alpha, t_grid, sgrid):
    """Independent route: transform once, apply the semigroup multiplier,
    and synthesize at the evaluation radius."""
    vh = spc.hft_radial(v, sgrid=sgrid)
    w = sgrid.gl_weights * sgrid.density * vh.values
    phi = spc.spherical_function(sgrid.nodes, r_x, v.n)
    tau = spc.tau(sgrid.nodes, v.n)
    out = np.array([2.0 * geo.sphere_area(v.n) * np.dot(w * np.exp(-ti * tau), phi)
                    for ti in t_grid])
    return -(math.sin(math.pi * alpha) / math.pi) * out * t_grid ** (-(1.0 + alpha))


def test_heat_trace_matches_spectral_route(source3, grids3):
    _, sg = grids3
    t = np.array([0.05, 0.2, 1.0, 5.0])
    hs = ent.heat_trace_f(source3, 0.0, 0.6, t)
    oracle = heat_trace_spectral(source3, 0.0, 0.6, t, sg)
    assert np.max(np.abs(hs.values - oracle)) <= 1e-12 * np.max(np.abs(oracle))


def test_heat_trace_matches_spectral_route_off_center(source3, grids3):
    _, sg = grids3
    t = np.array([0.05, 0.2, 1.0, 5.0])
    hs = ent.heat_trace_f(source3, 3.5, 0.6, t)
    oracle = heat_trace_spectral(source3, 3.5, 0.6, t, sg)
    assert np.max(np.abs(hs.values - oracle)) <= 1e-10 * np.max(np.abs(oracle))


def test_heat_trace_sign_and_linearity(source3):
    t = np.array([0.1, 1.0, 10.0])
    hs = ent.heat_trace_f(source3, 0.0, 0.3, t)
    assert np.all(hs.values < 0)
    doubled = spc.RadialFunction(source3.grid, 2.0 * source3.values)
    hs2 = ent.heat_trace_f(doubled, 0.0, 0.3, t)
    assert np.allclose(hs2.values, 2.0 * hs.values, rtol=1e-13)


def test_heat_trace_separation_recorded(source3):
    hs = ent.heat_trace_f(source3, 0.0, 0.5, np.array([1.0]))
    assert 1.0 <= hs.separation < 1.02


def test_heat_trace_support_violations(source3):
    t = np.array([0.5, 1.0])
    with pytest.raises(SupportError):
        ent.heat_trace_f(source3, 1.5, 0.5, t)
    with pytest.raises(SupportError):
        ent.heat_trace_f(source3, 2.2, 0.5, t, kappa=1.0)


def test_heat_trace_zero_data(grids3):
    rg, _ = grids3
    zero = spc.RadialFunction(rg, np.zeros_like(rg.nodes))
    hs = ent.heat_trace_f(zero, 0.0, 0.5, np.array([0.5, 1.0]))
    assert np.all(hs.values == 0.0)


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.2, 1.7])
def test_heat_trace_rejects_order(source3, alpha):
    with pytest.raises(DomainError):
        ent.heat_trace_f(source3, 0.0, alpha, np.array([1.0]))


def test_heat_trace_rejects_bad_time_grid(source3):
    with pytest.raises(DomainError):
        ent.heat_trace_f(source3, 0.0, 0.5, np.array([1.0, 0.5]))
    with pytest.raises(DomainError):
        ent.heat_trace_f(source3, 0.0, 0.5, np.array([-1.0, 0.5]))


def test_heat_trace_n2_smoke():
    rg = spc.RadialGrid.default(2)
    v = spc.RadialFunction(rg, smooth_bump(rg.nodes, 1.0, 2.0))
    hs = ent.heat_trace_f(v, 0.0, 0.4, np.array([0.2, 1.0, 5.0]))
    assert np.all(np.isfinite(hs.values))
    assert np.all(hs.values < 0)


# ---------------------------------------------------------------------------
# envelope fits
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def standard_trace(source3):
    t = np.exp(np.linspace(math.log(1e-3), math.log(50.0), 400))
    return ent.heat_trace_f(source3, 0.0, 0.6, t)


def test_envelope_rates_standard_config(standard_trace):
    fits = ent.envelope_fits(standard_trace)
    small, large = fits["small_t"]["rate"], fits["large_t"]["rate"]
    assert small == pytest.approx(0.2610506792811293, rel=1e-6)
    assert large == pytest.approx(1.1545610540006035, rel=1e-6)
    # the fitted rates sit within a quarter of the kernel targets
    # sep^2/4 and (n-1)^2/4
    target_small = standard_trace.separation**2 / 4.0
    assert abs(small - target_small) <= 0.25 * target_small
    assert abs(large - 1.0) <= 0.25


def test_envelope_fit_needs_samples(standard_trace):
    flat = np.zeros_like(standard_trace.values)
    with pytest.raises(DomainError, match="usable"):
        ent._fit_envelopes(standard_trace.t, flat, (1e-3, 1e-1), (5.0, 50.0))


# ---------------------------------------------------------------------------
# moment functionals
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def bessel_system():
    t = ent.moment_grid()
    f = t**2 * np.exp(-t - 1.0 / t)
    return ent.MomentSystem(alphas=(0.5,), t=t, f_values=f[None, :], m_start=0)


def test_moment_sum_against_closed_form(bessel_system):
    # integral t^{2-m} e^{-t-1/t} dt = 2 K_{3-m}(2)
    for m in range(7):
        got = ent.moment_sum(bessel_system, m)
        closed = math.gamma(m + 1.5) * 2.0 * special.kv(3 - m, 2.0)
        assert abs(got - closed) <= 1e-12 * abs(closed)
        assert got.error <= 1e-10 * abs(closed)


def test_moment_sum_against_adaptive_quad(bessel_system):
    for m in range(7):
        got = ent.moment_sum(bessel_system, m)
        ref, _ = integrate.quad(
            lambda t, m=m: t ** (2 - m) * math.exp(-t - 1.0 / t),
            0, np.inf, limit=200)
        ref *= math.gamma(m + 1.5)
        assert abs(got - ref) <= 1e-8 * abs(ref)


def test_moment_system_decay_fit(bessel_system):
    fit = bessel_system.decay_fits[0]
    assert fit["delta_small"] == pytest.approx(1.0, rel=0.15)
    assert fit["delta_large"] == pytest.approx(1.0, rel=0.15)


def test_moment_sum_linear(bessel_system):
    t, row = bessel_system.t, bessel_system.f_values[0]
    doubled = ent.MomentSystem(alphas=(0.5,), t=t, f_values=2.0 * row[None, :],
                               m_start=0)
    for m in (0, 2, 5):
        assert float(ent.moment_sum(doubled, m)) == pytest.approx(
            2.0 * float(ent.moment_sum(bessel_system, m)), rel=1e-14)


def test_moment_sum_guards(bessel_system):
    with pytest.raises(DomainError):
        ent.moment_sum(bessel_system, -1)
    shifted = ent.MomentSystem(alphas=(0.5,), t=bessel_system.t,
                               f_values=bessel_system.f_values, m_start=3)
    with pytest.raises(DomainError):
        ent.moment_sum(shifted, 2)
    with pytest.raises(DomainError):
        ent.moment_sum(bessel_system, 200)


def test_moment_sum_truncated_grid_raises():
    t = ent.moment_grid(t_min=0.05, t_max=60.0, count=300)
    f = t**2 * np.exp(-t - 1.0 / t)
    ms = ent.MomentSystem(alphas=(0.5,), t=t, f_values=f[None, :], m_start=0)
    with pytest.raises(QuadratureError, match="extend"):
        ent.moment_sum(ms, 3)


def test_moment_system_validation():
    t = ent.moment_grid(count=100)
    f = np.exp(-t - 1.0 / t)
    with pytest.raises(DomainError, match="distinct"):
        ent.MomentSystem(alphas=(0.5, 0.5), t=t, f_values=np.stack([f, f]))
    with pytest.raises(DomainError):
        ent.MomentSystem(alphas=(1.5,), t=t, f_values=f[None, :])
    with pytest.raises(DomainError, match="shaped"):
        ent.MomentSystem(alphas=(0.5,), t=t, f_values=f[None, :-1])
    with pytest.raises(DomainError, match="decay"):
        ent.MomentSystem(alphas=(0.5,), t=t, f_values=(1.0 / (1.0 + t))[None, :])


def test_moment_grid_guards():
    with pytest.raises(DomainError):
        ent.moment_grid(t_min=2.0, t_max=1.0)
    with pytest.raises(DomainError):
        ent.moment_grid(count=4)


# ---------------------------------------------------------------------------
# the decoupling test
# ---------------------------------------------------------------------------

def test_decoupling_single_order(profile_basis):
    profiles, _ = profile_basis
    rep = ent.decoupling_test((0.3,), profiles)
    assert rep.m_values == tuple(range(1, 13))
    assert rep.sigma_min == pytest.approx(1.569952686417944e-05, rel=1e-6)
    assert rep.condition_number == pytest.approx(270276.98, rel=1e-4)
    assert not rep.resonant


def test_decoupling_sigma_monotone_in_window(profile_basis):
    profiles, _ = profile_basis
    sigs = [ent.decoupling_test((0.3,), profiles, m_range=range(1, M + 1)).sigma_min
            for M in (12, 16, 20)]
    assert sigs[0] < sigs[1] < sigs[2]


def test_decoupling_two_distinct_orders():
    profiles, _ = ent.decaying_profile_basis(4)
    rep = ent.decoupling_test((0.3, 0.7), profiles)
    assert rep.sigma_min == pytest.approx(1.5998101859092187e-05, rel=1e-6)
    sigs = [ent.decoupling_test((0.3, 0.7), profiles, m_range=range(1, M + 1)).sigma_min
            for M in (12, 16, 20)]
    assert sigs[0] < sigs[1] < sigs[2]


def test_decoupling_wide_basis_stays_positive(profile_basis):
    # sixteen nearby profile columns push the conditioning to the double
    # precision edge, but the configuration is not degenerate and must
    # come back with a positive report rather than an error
    profiles, _ = profile_basis
    rep = ent.decoupling_test((0.3, 0.7), profiles)
    assert len(rep.m_values) == 19
    assert 0.0 < rep.sigma_min < 1e-11
    assert not rep.resonant


def test_decoupling_resonance_flagged(profile_basis):
    profiles, _ = profile_basis
    rep = ent.decoupling_test((0.5, 0.5), profiles)
    assert rep.resonant
    assert rep.sigma_min < 1e-10
    nv = rep.null_vector
    assert np.linalg.norm(nv) == pytest.approx(1.0, rel=1e-12)
    # the kernel pairs opposite-sign copies of the same profile block
    assert np.max(np.abs(nv[:8] + nv[8:])) < 1e-12


def test_decoupling_profile_scale_invariance(profile_basis):
    profiles, _ = profile_basis
    base = ent.decoupling_test((0.3, 0.7), profiles)
    scaled = [lambda t: 7.25 * profiles[0](t)] + profiles[1:]
    rep = ent.decoupling_test((0.3, 0.7), scaled)
    assert abs(rep.sigma_min - base.sigma_min) < 1e-12


def test_decoupling_duplicate_profiles_raise():
    profiles, _ = ent.decaying_profile_basis(4)
    with pytest.raises(IllConditionedError, match="condition number"):
        ent.decoupling_test((0.3, 0.7), [profiles[0], profiles[0]] + profiles[1:3])


def test_decoupling_guards(profile_basis):
    profiles, _ = profile_basis
    with pytest.raises(DomainError):
        ent.decoupling_test((1.3,), profiles)
    with pytest.raises(DomainError, match="window"):
        ent.decoupling_test((0.3, 0.7), profiles, m_range=range(1, 11))
    with pytest.raises(DomainError, match="vanish"):
        ent.decoupling_test((0.3,), [lambda t: 0.0 * t])
    with pytest.raises(DomainError):
        ent.decoupling_test((), [])


def test_decoupling_report_json(tmp_path, profile_basis):
    profiles, _ = profile_basis
    rep = ent.decoupling_test((0.3,), profiles)
    path = tmp_path / "moments.json"
    ent.write_moment_report(path, rep,
                            envelope_fits={"small_t": {"rate": 0.26}})
    doc = json.loads(path.read_text())
    assert doc["alphas"] == [0.3]
    assert doc["m_range"] == [1, 12]
    assert doc["sigma_min"] == pytest.approx(rep.sigma_min)
    assert doc["condition_number"] == pytest.approx(rep.condition_number)
    assert doc["envelope_fits"]["small_t"]["rate"] == 0.26
    assert not (tmp_path / "moments.json.tmp").exists()


def test_profile_basis_closed_form_moments(profile_basis):
    # integral t^{-m} e^{-a t - b / t} dt = 2 (b/a)^{(1-m)/2} K_{1-m}(2 sqrt(ab))
    profiles, params = profile_basis
    t = ent.moment_grid()
    u = np.log(t)
    for (a, b), g in zip(params[:3], profiles[:3]):
        for m in (0, 1, 4):
            got = float(np.trapezoid(g(t) * np.exp((1.0 - m) * u), u))
            closed = 2.0 * (b / a) ** (0.5 * (1 - m)) * special.kv(
                1 - m, 2.0 * math.sqrt(a * b))
            assert got == pytest.approx(closed, rel=1e-12)


# ---------------------------------------------------------------------------
# the integer-shift resonance
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def resonance_input(grids3):
    rg, _ = grids3
    vals = (spc.heat_kernel(rg.nodes, 0.4, 3)
            - 0.3 * spc.heat_kernel(rg.nodes, 0.9, 3))
    return spc.RadialFunction(rg, vals)


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
@pytest.mark.parametrize("m", [1, 2])
def test_resonance_defect_at_roundoff(resonance_input, s, m):
    assert ent.resonance_counterexample(resonance_input, s, m) < 1e-8


def test_resonance_zero_shift_degenerates(resonance_input):
    assert ent.resonance_counterexample(resonance_input, 0.5, 0) == 0.0


def test_resonance_guards(resonance_input):
    with pytest.raises(DomainError):
        ent.resonance_counterexample(resonance_input, 1.2, 1)
    with pytest.raises(DomainError):
        ent.resonance_counterexample(resonance_input, 0.5, -1)


def test_resonance_n2():
    rg = spc.RadialGrid.default(2)
    u = spc.RadialFunction(rg, spc.heat_kernel(rg.nodes, 0.5, 2))
    assert ent.resonance_counterexample(u, 0.5, 1) < 1e-7
