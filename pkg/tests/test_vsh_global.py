"""Channel expansion, amplitude matching, and the global extension."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import gammaln

from stokesapprox.errors import (
    BesselOverflowError,
    NumericalFailureError,
    QuadratureRefinementError,
    TailIntegrationError,
)
from stokesapprox import specfun as sf
from stokesapprox import vsh_global as vg
from stokesapprox.fields import (
    TensorBump,
    annulus_grid,
    ball_grid,
    bump_curl_field,
    bump_direction_field,
    laplacian_fd,
    radial_gl,
    sphere_grid,
    source_region_grid,
)
from stokesapprox.kernel import resolvent_convolve

LAM = 2.0 * np.exp(3j * np.pi / 4)
YBOX = ((3.0, 4.0), (3.0, 4.0), (3.0, 4.0))


@pytest.fixture(scope="module")
def v1():
    region = source_region_grid(YBOX, 1, 10)
    bump = TensorBump.for_cell(np.asarray(YBOX))
    fld = bump_direction_field(bump, np.array([0.4, -1.0, 0.8]))
    return resolvent_convolve(LAM, fld, region)


@pytest.fixture(scope="module")
def ball():
    return ball_grid(1.5, 14, sphere_grid(12))


@pytest.fixture(scope="module")
def table(v1, ball):
    return vg.build_coeff_table(LAM, v1, ball, l_max=10)


@pytest.fixture(scope="module")
def dball():
    return ball_grid(1.0, 10, sphere_grid(10))


def _energy(grid, values):
    return float(np.sum(grid.weights * np.sum(np.abs(values) ** 2, axis=-1)))


# ---------------------------------------------------------------------------
# Channel expansion
# ---------------------------------------------------------------------------


def test_expand_parseval(table, ball, v1):
    prof = table.profiles
    total = prof.total_energy
    assert total > 0.0
    gap = abs(prof.per_l_energy().sum() - total)
    assert gap <= 1e-8 * total


def test_expand_single_mode_pickup(ball):
    # a pure (l, m) = (2, 1) radial-channel field must land in exactly that
    # channel, with the radial profile recovered at the quadrature nodes
    def closure(points):
        from stokesapprox.fields import to_spherical

        r, th, ph = to_spherical(np.atleast_2d(points))
        yv, _, _ = sf.vsh_eval(2, 1, th, ph)
        g = (1.0 + 0.3j) * r**2
        return g[:, None] * yv

    prof = vg.expand_vsh(closure, LAM, ball, l_max=6)
    assert_allclose(prof.c_r[(2, 1)], (1.0 + 0.3j) * prof.r_nodes**2, rtol=1e-12)
    scale = np.max(np.abs(prof.c_r[(2, 1)]))
    for (l, m), arr in prof.c_r.items():
        if (l, m) != (2, 1):
            assert np.max(np.abs(arr)) <= 1e-10 * scale
    for arr in list(prof.c_1.values()) + list(prof.c_2.values()):
        assert np.max(np.abs(arr)) <= 1e-10 * scale


def test_expand_zero_field(ball):
    prof = vg.expand_vsh(lambda p: np.zeros_like(p, dtype=complex), LAM, ball, l_max=4)
    assert prof.total_energy == 0.0
    for arr in prof.c_r.values():
        assert np.all(arr == 0)


def test_expand_aliasing_warns(ball):
    # all the energy in the top retained degree is the aliasing red flag
    def closure(points):
        from stokesapprox.fields import to_spherical

        _, th, ph = to_spherical(np.atleast_2d(points))
        yv, _, _ = sf.vsh_eval(5, 2, th, ph)
        return yv.astype(complex)

    with pytest.warns(UserWarning, match="aliasing"):
        vg.expand_vsh(closure, LAM, ball, l_max=5)


def test_expand_lmax_validation(ball):
    with pytest.raises(ValueError, match="resolvable"):
        vg.expand_vsh(lambda p: np.zeros_like(p, dtype=complex), LAM, ball, l_max=12)
    with pytest.raises(ValueError):
        vg.expand_vsh(lambda p: np.zeros_like(p, dtype=complex), LAM, ball, l_max=0)


def test_monopole_channel_vanishes(v1, ball):
    # the radial monopole of a divergence-free field carries no flux, which
    # justifies starting the expansion at l = 1
    vals = ball.per_radius(v1.velocity(ball.points))
    sph = ball.sphere
    rhat, _, _ = sf.unit_vectors(sph.theta, sph.phi)
    mono = np.einsum("rsk,sk->r", vals, rhat * sph.weights[:, None])
    e_mono = np.sum(ball.r_weights * ball.r_nodes**2 * np.abs(mono) ** 2)
    assert e_mono <= 1e-20 * vg.expand_vsh(v1, LAM, ball, l_max=8).total_energy


# ---------------------------------------------------------------------------
# Pressure-series coefficients
# ---------------------------------------------------------------------------


def test_blm_divergence_free_source(ball):
    # a curl field has exactly zero divergence, so the pressure gradient and
    # with it every series coefficient vanishes identically
    region = source_region_grid(YBOX, 1, 10)
    bump = TensorBump.for_cell(np.asarray(YBOX))
    fld = bump_curl_field(bump, np.array([0.2, 0.9, -0.5]))
    v1c = resolvent_convolve(LAM, fld, region)
    B = vg.compute_Blm(LAM, v1c, ball, 6)
    assert max(abs(b) for b in B.values()) == 0.0


def test_blm_requires_pressure_closure(ball):
    with pytest.raises(ValueError, match="pressure-gradient"):
        vg.compute_Blm(LAM, lambda p: np.zeros_like(p), ball, 4)


def test_pressure_series_reproduces_gradient(table, v1):
    # the truncated harmonic series built from the fitted coefficients must
    # evaluate to the same gradient as the projection closure of the field
    sph = sphere_grid(10)
    rhat, _, _ = sf.unit_vectors(sph.theta, sph.phi)
    pts = 1.2 * rhat
    gs = vg.pressure_series_gradient(table, 10)(pts)
    gd = v1.grad_pressure(pts)
    err = np.max(np.abs(gs - gd)) / np.max(np.abs(gd))
    assert err <= 1e-4


# ---------------------------------------------------------------------------
# Driven radial channel (quadrature vs closed form)
# ---------------------------------------------------------------------------

# For a harmonic pressure mode the driven channel collapses: combining the
# antiderivative identity d/dz [z^nu I_nu] = z^nu I_{nu-1} (and its K twin)
# with the product identity I_nu K_{nu+1} + I_{nu+1} K_nu = 1/z reduces the
# two radial integrals to -l B r^(l-1) / lam exactly.  The quadrature path
# must reproduce that closed form at every radius and degree.


@pytest.mark.parametrize("lam", [1.0, LAM, np.conj(LAM), 9.0 + 4.0j])
def test_lambda_matches_closed_form(lam):
    r = np.array([0.01, 0.1, 0.5, 1.0, 1.4999, 3.0, 10.0, 30.0, 50.0])
    B = 0.7 - 0.3j
    for l in (1, 2, 3, 5, 8, 12, 24):
        got = vg.compute_Lambda(l, B, lam, r)
        want = -l * B * r ** (l - 1.0) / lam
        assert_allclose(got, want, rtol=5e-10)


@pytest.mark.parametrize("lam", [1.0, LAM, 9.0 + 4.0j])
def test_lambda_prime_matches_closed_form(lam):
    r = np.array([0.1, 0.5, 1.0, 1.4999, 3.0, 10.0, 30.0])
    B = 0.7 - 0.3j
    for l in (2, 3, 5, 8, 12, 24):
        got = vg.compute_Lambda_prime(l, B, lam, r)
        want = -l * (l - 1.0) * B * r ** (l - 2.0) / lam
        assert_allclose(got, want, rtol=5e-10)
    # degree 1 drives a constant channel: derivative exactly zero
    gotp = vg.compute_Lambda_prime(1, B, lam, r)
    scale = abs(B / lam)
    assert np.max(np.abs(gotp)) <= 1e-10 * scale


def test_lambda_prime_matches_difference_quotient():
    r0 = 0.8
    h = 1e-3
    B = 1.1 + 0.4j
    for l in (1, 3, 6):
        dq = (
            vg.compute_Lambda(l, B, LAM, r0 + h) - vg.compute_Lambda(l, B, LAM, r0 - h)
        ) / (2.0 * h)
        got = vg.compute_Lambda_prime(l, B, LAM, r0)
        assert abs(dq - got) <= 1e-5 * max(abs(got), abs(B))


def test_lambda_zero_coefficient_short_circuits():
    r = np.array([0.5, 2.0])
    assert np.all(vg.compute_Lambda(3, 0.0, LAM, r) == 0)
    assert np.all(vg.compute_Lambda_prime(3, 0.0, LAM, r) == 0)
    assert vg.compute_Lambda(3, 0.0, LAM, 1.0) == 0j


def test_lambda_scalar_roundtrip():
    out = vg.compute_Lambda(2, 1.0, LAM, 0.7)
    assert isinstance(out, complex)
    arr = vg.compute_Lambda(2, 1.0, LAM, np.array([0.7]))
    assert_allclose(out, arr[0], rtol=1e-12)


def test_lambda_linear_in_coefficient():
    r = np.array([0.3, 1.2, 4.0])
    one = vg.compute_Lambda(4, 1.0, LAM, r)
    two = vg.compute_Lambda(4, 2.0 - 1.0j, LAM, r)
    assert_allclose(two, (2.0 - 1.0j) * one, rtol=1e-12)


def test_lambda_majorant():
    # |Lambda| <= (C l)^(C l) |B| max((Re sqrt(lam))^(-l-1), r^(l+1)) with C = 4
    for l, lam, r in [(1, 1.0, 0.5), (3, LAM, 2.0), (6, 9.0 + 4.0j, 0.25)]:
        w = sf.sqrt_principal(lam).real
        val = abs(vg.compute_Lambda(l, 1.0, lam, r))
        bound = (4.0 * l) ** (4.0 * l) * max(w ** (-l - 1.0), r ** (l + 1.0))
        assert val <= bound


def test_lambda_validation():
    with pytest.raises(ValueError):
        vg.compute_Lambda(0, 1.0, LAM, 1.0)
    with pytest.raises(ValueError):
        vg.compute_Lambda(2, 1.0, LAM, np.array([0.5, -1.0]))


def test_tail_node_budget_error():
    with pytest.raises(TailIntegrationError, match="nodes"):
        vg.compute_Lambda(1, 1.0, LAM, np.array([1.0]), node_budget=16)


def test_finite_moment_refinement_guard():
    # a tolerance below the mantissa rounding floor can never be met, so the
    # node-doubling loop must fail loudly instead of looping forever
    with pytest.raises(QuadratureRefinementError, match="settle"):
        vg._finite_moment(1, LAM, np.array([1.0]), tol=1e-18)


# ---------------------------------------------------------------------------
# Bessel weight integrals
# ---------------------------------------------------------------------------


def test_bessel_weight_frozen_value():
    # l = 0, j = 1, lam = 1, rho = 1.5: the order-1/2 shape is sinh, and
    # integral_0^1.5 r * (2/(pi r)) sinh(r)^2 dr = (2/pi)(sinh(3)/4 - 3/4)
    want = (2.0 / math.pi) * (math.sinh(3.0) / 4.0 - 0.75)
    got = vg.bessel_weighted_integral(0, 1, 1.0, 1.5)
    assert_allclose(got, want, rtol=1e-12)
    assert abs(got - 1.11706) < 5e-4


def test_bessel_weight_positive():
    for lam in (1.0, LAM):
        for l in range(0, 9):
            for j in (-1, 1):
                assert vg.bessel_weighted_integral(l, j, lam, 1.5) > 0.0


def test_bessel_weight_validation():
    with pytest.raises(ValueError):
        vg.bessel_weighted_integral(1, 0, 1.0, 1.5)
    with pytest.raises(ValueError):
        vg.bessel_weighted_integral(1, 1, 1.0, -1.0)


def test_bessel_weight_overflow_guard():
    with pytest.raises(BesselOverflowError):
        vg.bessel_weighted_integral(1, 1, 360000.0, 1.5)


@pytest.mark.parametrize("lam", [1.0, LAM])
def test_bessel_weight_lower_envelope(lam):
    # fit the constant of the small-argument model on low degrees, then
    # check the higher degrees stay above 90% of the fitted envelope
    z = sf.sqrt_principal(lam)
    rho = 1.5

    def model_log(l):
        return (
            (2 * l + 1) * math.log(abs(z) * rho / 2.0)
            - math.log(2 * l + 1)
            - 2.0 * gammaln(l + 1.5)
        )

    ratios = [
        math.log(vg.bessel_weighted_integral(l, -1, lam, rho)) - model_log(l)
        for l in range(1, 13)
    ]
    c_low = min(ratios[:6])
    for rr in ratios[6:]:
        assert rr >= c_low + math.log(0.9)


# ---------------------------------------------------------------------------
# Amplitude matching
# ---------------------------------------------------------------------------


def _synthetic_profiles(lam, coeffs, l_max=6, n_r=14, rho=1.5):
    """Profiles whose channels are exact closed-form fields.

    ``coeffs`` maps (l, m) to a dict with any of the amplitudes
    ``A`` (radial Bessel), ``B`` (pressure), ``A2`` (rotational Bessel).
    """
    r, wr = radial_gl(0.0, rho, n_r)
    z = sf.sqrt_principal(lam)
    c_r, c_1, c_2 = {}, {}, {}
    for l in range(1, l_max + 1):
        mu = sf.angular_eigenvalue(l)
        i_tab = sf._bessel_i_half_scaled_many([l - 1, l], z * r)
        ex = np.exp(z.real * r)
        i_l = i_tab[l] * ex
        i_lm1 = i_tab[l - 1] * ex
        for m in range(-l, l + 1):
            spec = coeffs.get((l, m), {})
            a = spec.get("A", 0.0)
            b = spec.get("B", 0.0)
            a2 = spec.get("A2", 0.0)
            lam_vals = -l * b * r ** (l - 1.0) / lam
            lam_prime = -l * (l - 1.0) * b * r ** (l - 2.0) / lam
            c_r[(l, m)] = a * r**-1.5 * i_l + lam_vals
            c_1[(l, m)] = (a / mu) * (-l * r**-1.5 * i_l + z * r**-0.5 * i_lm1) + (
                2.0 * lam_vals + r * lam_prime
            ) / mu
            c_2[(l, m)] = (a2 / mu) * r**-0.5 * i_l
    return vg.ChannelProfiles(
        lam=complex(lam),
        rho=rho,
        l_max=l_max,
        r_nodes=r,
        r_weights=wr,
        c_r=c_r,
        c_1=c_1,
        c_2=c_2,
        total_energy=float("nan"),
    )


def test_compute_cr_recovers_amplitude():
    amp = 0.8 - 1.3j
    b = 0.5 + 0.2j
    prof = _synthetic_profiles(LAM, {(3, -2): {"A": amp, "B": b}})
    got = vg.compute_Cr(3, -2, prof, LAM, b)
    assert_allclose(got, amp, rtol=1e-8)


def test_compute_cr_zero_for_pure_driven_profile():
    b = 1.7 - 0.4j
    prof = _synthetic_profiles(LAM, {(2, 1): {"B": b}})
    got = vg.compute_Cr(2, 1, prof, LAM, b)
    assert abs(got) <= 1e-10 * abs(b)


def test_compute_c2_roundtrip():
    # the stored amplitude is the l(l+1)-weighted projection; dividing it
    # back out must reproduce the channel that was put in
    amp = 1.1 + 0.6j
    l, m = 4, 3
    mu = sf.angular_eigenvalue(l)
    prof = _synthetic_profiles(LAM, {(l, m): {"A2": amp}})
    got = vg.compute_C2(l, m, prof, LAM)
    assert_allclose(got, amp, rtol=1e-8)
    z = sf.sqrt_principal(LAM)
    r = prof.r_nodes
    ivals = sf._bessel_i_half_scaled_many([l], z * r)[l] * np.exp(z.real * r)
    rec = (got / mu) * r**-0.5 * ivals
    assert_allclose(rec, prof.c_2[(l, m)], rtol=1e-8)


def test_compute_c2_linear():
    p1 = _synthetic_profiles(LAM, {(2, 0): {"A2": 1.0}})
    p2 = _synthetic_profiles(LAM, {(2, 0): {"A2": 3.0 - 2.0j}})
    v1_ = vg.compute_C2(2, 0, p1, LAM)
    v2_ = vg.compute_C2(2, 0, p2, LAM)
    assert_allclose(v2_, (3.0 - 2.0j) * v1_, rtol=1e-10)


# ---------------------------------------------------------------------------
# Matched table and global evaluation
# ---------------------------------------------------------------------------


def test_table_reconstructs_profiles(table):
    # every expanded channel must equal its closed-form reconstruction from
    # the matched amplitudes, uniformly over modes and radii
    prof = table.profiles
    r = prof.r_nodes
    z = sf.sqrt_principal(LAM)
    scale = math.sqrt(prof.total_energy / (4.0 / 3.0 * math.pi * prof.rho**3))
    worst = 0.0
    for l in range(1, prof.l_max + 1):
        mu = sf.angular_eigenvalue(l)
        i_tab = sf._bessel_i_half_scaled_many([l - 1, l], z * r)
        ex = np.exp(z.real * r)
        i_l = i_tab[l] * ex
        i_lm1 = i_tab[l - 1] * ex
        g, gp = vg._lambda_pair_unit(l, LAM, r)
        for m in range(-l, l + 1):
            b = table.B[(l, m)]
            cr = table.C_r[(l, m)] * r**-1.5 * i_l + b * g
            c1 = (table.C_r[(l, m)] / mu) * (
                -l * r**-1.5 * i_l + z * r**-0.5 * i_lm1
            ) + b * (2.0 * g + r * gp) / mu
            c2 = (table.C_2[(l, m)] / mu) * r**-0.5 * i_l
            worst = max(worst, np.max(np.abs(cr - prof.c_r[(l, m)])) / scale)
            worst = max(worst, np.max(np.abs(c1 - prof.c_1[(l, m)])) / scale)
            worst = max(worst, np.max(np.abs(c2 - prof.c_2[(l, m)])) / scale)
    assert worst <= 1e-5


def test_table_modes_and_closures(table):
    assert table.modes() == [(l, m) for l in range(1, 11) for m in range(-l, l + 1)]
    assert table.dropped == ()
    closure = table.Lambda(2, 1)
    r = np.array([0.4, 1.1])
    assert_allclose(closure(r), vg.compute_Lambda(2, table.B[(2, 1)], LAM, r))
    closure_p = table.Lambda_prime(2, 1)
    assert_allclose(closure_p(r), vg.compute_Lambda_prime(2, table.B[(2, 1)], LAM, r))


def test_radial_derivative_consistency(table):
    # divergence-free radial balance: c_1 = (2 c_r + r dc_r/dr) / (l(l+1)),
    # with the derivative taken by sliding 5-point barycentric stencils on
    # the radial Gauss nodes
    prof = table.profiles
    r = prof.r_nodes

    def deriv(y):
        n = len(r)
        out = np.zeros_like(y)
        for i in range(n):
            j0 = min(max(i - 2, 0), n - 5)
            xs = r[j0 : j0 + 5]
            ys = y[j0 : j0 + 5]
            wts = np.ones(5)
            for a in range(5):
                for bb in range(5):
                    if a != bb:
                        wts[a] /= xs[a] - xs[bb]
            i_loc = i - j0
            coeff = np.zeros(5, dtype=complex)
            for a in range(5):
                if a == i_loc:
                    coeff[a] = sum(
                        1.0 / (xs[i_loc] - xs[bb]) for bb in range(5) if bb != i_loc
                    )
                else:
                    coeff[a] = wts[a] / (wts[i_loc] * (xs[i_loc] - xs[a]))
            out[i] = coeff @ ys
        return out

    scale = max(np.max(np.abs(prof.c_1[k])) for k in prof.c_1)
    worst = 0.0
    for l in range(1, 9):
        mu = sf.angular_eigenvalue(l)
        for m in range(-l, l + 1):
            cr = prof.c_r[(l, m)]
            lhs = (2.0 * cr + r * deriv(cr)) / mu
            worst = max(worst, np.max(np.abs(lhs - prof.c_1[(l, m)])) / scale)
    assert worst <= 1e-5


def test_truncation_error_bounded_by_tail(table, v1, dball):
    ref = v1.velocity(dball.points)
    for l0 in (3, 5, 8):
        u = vg.eval_global_u(dball.points, LAM, table, l0)
        err2 = _energy(dball, u - ref)
        tail = vg.tail_energy(table.profiles, l0)
        assert err2 <= tail + 1e-8


def test_full_reconstruction_inside_ball(table, v1, dball):
    ref = v1.velocity(dball.points)
    u = vg.eval_global_u(dball.points, LAM, table, table.l_max)
    rel = math.sqrt(_energy(dball, u - ref) / _energy(dball, ref))
    assert rel <= 1e-6


def test_tail_energy_monotone(table):
    prof = table.profiles
    tails = [vg.tail_energy(prof, l0) for l0 in range(1, prof.l_max + 1)]
    assert all(a >= b for a, b in zip(tails, tails[1:]))
    assert tails[-1] == 0.0


def test_per_degree_energy_envelope(table):
    # fit the constant of the <l>^-4 envelope on low degrees and verify the
    # high degrees stay below it (the decay here is much faster)
    per_l = table.profiles.per_l_energy()
    ls = np.arange(1, table.l_max + 1, dtype=float)
    weights = (1.0 + ls * ls) ** 2  # <l>^4
    c_fit = max(per_l[1:6] * weights[:5])
    for l in range(6, table.l_max + 1):
        assert per_l[l] <= c_fit / (1.0 + l * l) ** 2 * 1.0001


def test_split_identity(table):
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(100, 3))
    radii = 0.3 + 2.7 * rng.random(100)
    pts *= (radii / np.linalg.norm(pts, axis=1))[:, None]
    u1c, u2c = vg.split_u1_u2(table, 8)
    tot = vg.eval_global_u(pts, LAM, table, 8)
    gap = np.max(np.abs(u1c(pts) + u2c(pts) - tot))
    assert gap <= 1e-12 * np.max(np.abs(tot))


def test_u1_is_scaled_pressure_gradient(table):
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(40, 3))
    pts *= ((0.5 + 2.0 * rng.random(40)) / np.linalg.norm(pts, axis=1))[:, None]
    u1c, _ = vg.split_u1_u2(table, 8)
    lhs = LAM * u1c(pts)
    rhs = -vg.pressure_series_gradient(table, 8)(pts)
    assert np.max(np.abs(lhs - rhs)) <= 1e-8 * np.max(np.abs(lhs))


def test_homogeneous_residual_on_annuli(table):
    # the extension solves the homogeneous system with the series pressure
    # everywhere, both inside the expansion ball and beyond it
    gq = vg.pressure_series_gradient(table, 8)

    def ucl(p):
        return vg.eval_global_u(p, LAM, table, 8)

    for r_in, r_out in [(1.1, 1.4), (2.0, 2.5)]:
        ann = annulus_grid(r_in, r_out, 3, sphere_grid(6))
        lap = laplacian_fd(ucl, ann.points, 0.02)
        uval = ucl(ann.points)
        gval = gq(ann.points)
        res = LAM * uval - lap + gval
        scale = np.max(np.abs(LAM * uval)) + np.max(np.abs(gval))
        assert np.max(np.abs(res)) <= 1e-6 * scale


def test_u2_heat_residual(table):
    _, u2c = vg.split_u1_u2(table, 8)
    ann = annulus_grid(1.1, 1.4, 3, sphere_grid(6))
    lap = laplacian_fd(u2c, ann.points, 0.02)
    res = LAM * u2c(ann.points) - lap
    assert np.max(np.abs(res)) <= 1e-6 * np.max(np.abs(LAM * u2c(ann.points)))


def test_extension_divergence_free(table):
    ann = annulus_grid(1.2, 1.6, 2, sphere_grid(5))

    def ucl(p):
        return vg.eval_global_u(p, LAM, table, 8)

    h = 1e-3
    div = np.zeros(len(ann.points), dtype=complex)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        div += (ucl(ann.points + e)[:, k] - ucl(ann.points - e)[:, k]) / (2.0 * h)
    assert np.max(np.abs(div)) <= 1e-5 * np.max(np.abs(ucl(ann.points)))


def test_heat_only_degeneracy(ball, dball):
    # divergence-free forcing leaves no pressure series: the driven part is
    # identically zero and the Bessel part alone reproduces the field
    region = source_region_grid(YBOX, 1, 10)
    bump = TensorBump.for_cell(np.asarray(YBOX))
    fld = bump_curl_field(bump, np.array([0.2, 0.9, -0.5]))
    v1c = resolvent_convolve(LAM, fld, region)
    tab = vg.build_coeff_table(LAM, v1c, ball, l_max=10)
    assert max(abs(b) for b in tab.B.values()) == 0.0
    u1c, u2c = vg.split_u1_u2(tab, 10)
    pts = dball.points
    assert np.max(np.abs(u1c(pts))) == 0.0
    ref = v1c.velocity(pts)
    rel = math.sqrt(_energy(dball, u2c(pts) - ref) / _energy(dball, ref))
    assert rel <= 1e-6


def test_eval_validation(table):
    with pytest.raises(ValueError, match="does not match"):
        vg.eval_global_u(np.array([1.0, 0.0, 0.0]), 2.0 * LAM, table, 4)
    with pytest.raises(ValueError, match="origin"):
        vg.eval_global_u(np.zeros(3), LAM, table, 4)


def test_eval_single_point_shape(table):
    out = vg.eval_global_u(np.array([0.3, -0.2, 0.5]), LAM, table, 6)
    assert out.shape == (3,)
    batch = vg.eval_global_u(np.array([[0.3, -0.2, 0.5]]), LAM, table, 6)
    assert batch.shape == (1, 3)
    assert_allclose(out, batch[0], rtol=1e-12)


def test_eval_polar_axis_regular(table):
    # points on the z-axis take the frame limit; they must agree with a
    # slightly tilted neighbour
    on_axis = vg.eval_global_u(np.array([[0.0, 0.0, 0.9]]), LAM, table, 8)[0]
    tilted = vg.eval_global_u(np.array([[1e-6, 0.0, 0.9]]), LAM, table, 8)[0]
    assert np.all(np.isfinite(on_axis))
    assert np.max(np.abs(on_axis - tilted)) <= 1e-4 * np.max(np.abs(tilted))


def test_bessel_part_overflow_guard(table):
    with pytest.raises(BesselOverflowError):
        vg.eval_global_u(np.array([[2000.0, 0.0, 0.0]]), LAM, table, 4)


# ---------------------------------------------------------------------------
# Truncation degree
# ---------------------------------------------------------------------------


def test_l0_formula_hand_value():
    # bracket 1, eps 1, C 1, mu 4: (1/2)^(-1/3) e^(2/3) = 2^(1/3) e^(2/3)
    want = 2.0 ** (1.0 / 3.0) * math.exp(2.0 / 3.0)
    assert_allclose(vg.l0_cutoff_formula(1.0, 1.0, 1.0, 4.0), want, rtol=1e-12)
    assert math.ceil(vg.l0_cutoff_formula(1.0, 1.0, 1.0, 4.0)) == 3


def test_choose_l0_matches_formula():
    pick = vg.choose_l0(1.0, 1.0, 1.0, 4.0)
    raw = vg.l0_cutoff_formula(math.sqrt(2.0), 1.0, 1.0, 4.0)
    assert pick.l0_formula == raw
    assert pick.l0_effective == math.ceil(raw)
    assert not pick.capped


def test_choose_l0_monotone_in_eps():
    vals = [vg.choose_l0(e, 1.0, 1.0, 4.0).l0_formula for e in (1.0, 0.5, 0.3)]
    assert vals[0] < vals[1] < vals[2]


def test_choose_l0_caps():
    pick = vg.choose_l0(1e-3, 1.0, 1.0, 4.0)
    assert pick.capped
    assert pick.l0_effective == 24
    assert math.isinf(pick.l0_formula)
    mild = vg.choose_l0(0.28, 1.0, 1.0, 4.0, l_max_cap=4)
    assert mild.capped
    assert mild.l0_effective == 4
    assert math.isfinite(mild.l0_formula)


def test_choose_l0_validation():
    with pytest.raises(ValueError):
        vg.choose_l0(0.0, 1.0, 1.0, 4.0)
    with pytest.raises(ValueError):
        vg.l0_cutoff_formula(1.0, 1.0, -1.0, 4.0)


# ---------------------------------------------------------------------------
# Growth report
# ---------------------------------------------------------------------------


def _single_mode_table():
    B, C_r, C_2 = {}, {}, {}
    for l in (1, 2):
        for m in range(-l, l + 1):
            B[(l, m)] = 0j
            C_r[(l, m)] = 0j
            C_2[(l, m)] = 0j
    B[(2, 1)] = 1.0 + 0j
    C_r[(1, 0)] = 1.0 + 0j
    return vg.VshCoeffTable(
        lam=1.0 + 0j, rho=1.5, l_max=2, B=B, C_r=C_r, C_2=C_2, profiles=None
    )


def test_growth_report_hand_values():
    tab = _single_mode_table()
    rep = vg.growth_report(
        math.sqrt(2.0) / 2.0,
        1.0,
        tab,
        2,
        v_norm=1.0,
        C_growth=1.0,
        mu=4.0,
        radii_u1=np.linspace(5, 50, 10),
        radii_u2=np.linspace(10, 40, 9),
    )
    # bracket / eps = 2 and 4/mu = 1, so the exponent is exactly 2
    assert_allclose(rep.N, 2.0, rtol=1e-12)
    # one degree-2 pressure mode grows like r^(l-1) = r
    assert abs(rep.slope_u1 - 1.0) <= 0.05
    # the Bessel part grows at the square-root rate (finite-window fit sits
    # slightly below because of the algebraic prefactor)
    assert 0.9 <= rep.rate_u2 <= 1.1


def test_growth_report_real_field(table):
    prof = table.profiles
    rep = vg.growth_report(
        0.5,
        LAM,
        table,
        8,
        v_norm=math.sqrt(prof.total_energy),
        C_growth=1.0,
        mu=4.0,
    )
    w = sf.sqrt_principal(LAM).real
    # retained degrees reach l = 8, so the driven part grows at most like r^7
    assert rep.slope_u1 <= 7.5
    assert 0.8 * w <= rep.rate_u2 <= 1.1 * w
    assert np.all(rep.samples_u1 <= rep.bound_u1(rep.radii_u1))
    assert np.all(rep.samples_u2 <= rep.bound_u2(rep.radii_u2))


def test_growth_report_failure_on_empty_field():
    tab = _single_mode_table()
    silent = vg.VshCoeffTable(
        lam=1.0 + 0j,
        rho=1.5,
        l_max=2,
        B={k: 0j for k in tab.B},
        C_r={k: 0j for k in tab.C_r},
        C_2={k: 0j for k in tab.C_2},
        profiles=None,
    )
    with pytest.raises(NumericalFailureError, match="growth"):
        vg.growth_report(0.5, 1.0, silent, 2, v_norm=1.0, C_growth=1.0, mu=4.0)
