"""Tests for the resolvent kernels, convolution fields, and residual checks."""

import mpmath as mp
import numpy as np
import pytest
from numpy.testing import assert_allclose

from stokesapprox import fields as F
from stokesapprox import kernel as K

BOX = ((3.0, 4.0), (3.0, 4.0), (3.0, 4.0))


def _region(cells=2, n_gl=5):
    return F.source_region_grid(BOX, cells, n_gl)


def _curl_source():
    bump = F.TensorBump(center=np.full(3, 3.5), halfwidth=np.full(3, 0.45))
    return F.bump_curl_field(bump, np.array([0.0, 0.0, 1.0]))


# ---------------------------------------------------------------------------
# scalar kernels
# ---------------------------------------------------------------------------


def test_fundamental_E_hand_values():
    x = np.array([1.0, 0.0, 0.0])
    got = K.fundamental_E(1.0, x)
    assert_allclose(got, np.exp(-1.0) / (4.0 * np.pi), rtol=1e-14)
    assert np.isclose(got.real, 0.0292661, rtol=5e-4)  # quoted to slide-rule pi
    got4 = K.fundamental_E(4.0, np.array([0.0, 1.0, 0.0]))
    assert_allclose(got4, np.exp(-2.0) / (4.0 * np.pi), rtol=1e-14)
    assert np.isclose(got4.real, 0.0107680, rtol=5e-4)
    with pytest.raises(ValueError):
        K.fundamental_E(1.0, np.zeros(3))


def test_fundamental_E_far_decay_doubling():
    # doubling the radius must multiply by ~ exp(-r) * (1/2)
    radii = np.array([4.0, 8.0, 16.0])
    vals = np.abs(K.fundamental_E(1.0, radii[:, None] * np.array([1.0, 0.0, 0.0])))
    for r, a, b in zip(radii[:-1], vals[:-1], vals[1:]):
        assert_allclose(b / a, np.exp(-r) * 0.5, rtol=1e-12)


def _mp_kernels(lam, r):
    with mp.workdps(60):
        z = mp.sqrt(mp.mpc(lam))
        rr = mp.mpf(r)
        s = z * rr
        E = mp.e ** (-s) / (4 * mp.pi * rr)
        psi = (1 - mp.e ** (-s)) / (4 * mp.pi * rr)
        psi1 = (-1 + (1 + s) * mp.e ** (-s)) / (4 * mp.pi * rr**2)
        psi2 = (2 - (2 + 2 * s + s * s) * mp.e ** (-s)) / (4 * mp.pi * rr**3)
        return [complex(v) for v in (E, psi, psi1, psi2)]


@pytest.mark.parametrize("lam", [2.0 + 3.0j, 0.3, 16.0 - 5.0j])
def test_scalar_kernels_match_mpmath(lam):
    z = np.sqrt(complex(lam))
    for s_mag in (1e-8, 1e-3, 0.2, 0.49, 0.51, 1.2, 6.0, 30.0):
        r = s_mag / abs(z)
        exact = _mp_kernels(lam, r)
        got = [
            complex(K.helmholtz_green(lam, r)),
            complex(K.psi_kernel(lam, r)),
            complex(K.psi_prime(lam, r)),
            complex(K.psi_second(lam, r)),
        ]
        for g, e in zip(got, exact):
            assert abs(g - e) <= 1e-12 * abs(e)


def test_scalar_kernels_zero_radius_limits():
    lam = 2.0 - 1.5j
    z = np.sqrt(complex(lam))
    assert_allclose(complex(K.psi_kernel(lam, 0.0)), z / (4 * np.pi), rtol=1e-14)
    assert_allclose(complex(K.psi_prime(lam, 0.0)), -(z**2) / (8 * np.pi), rtol=1e-14)
    assert_allclose(complex(K.psi_second(lam, 0.0)), z**3 / (12 * np.pi), rtol=1e-14)


def test_series_branch_continuous_at_cut():
    lam = 3.0 + 2.0j
    z = np.sqrt(complex(lam))
    for f in (K.psi_kernel, K.psi_prime, K.psi_second):
        lo = complex(f(lam, (0.5 - 1e-9) / abs(z)))
        hi = complex(f(lam, (0.5 + 1e-9) / abs(z)))
        assert abs(lo - hi) <= 1e-8 * abs(lo)


def test_kernel_conjugation_symmetry():
    lam = 2.0 + 3.0j
    r = np.array([0.05, 0.7, 3.0])
    for f in (K.helmholtz_green, K.psi_kernel, K.psi_prime, K.psi_second):
        assert_allclose(f(np.conj(lam), r), np.conj(f(lam, r)), rtol=1e-14)
    diffs = np.array([[0.3, -1.0, 0.2], [2.0, 0.5, -0.4]])
    assert_allclose(
        K.resolvent_tensor(np.conj(lam), diffs),
        np.conj(K.resolvent_tensor(lam, diffs)),
        rtol=1e-14,
    )


# ---------------------------------------------------------------------------
# convolution field and residuals
# ---------------------------------------------------------------------------


def test_velocity_conjugation_symmetry():
    region = _region(2, 4)
    fld = _curl_source()
    lam = 1.5 + 2.5j
    pts = np.array([[0.3, -0.2, 0.5], [1.0, 0.2, -0.1]])
    u = K.resolvent_convolve(lam, fld, region).velocity(pts)
    uc = K.resolvent_convolve(np.conj(lam), fld, region).velocity(pts)
    assert_allclose(uc, np.conj(u), rtol=1e-13, atol=1e-18)


def test_zero_source_gives_zero_field():
    region = _region(1, 3)
    zero = F.SmoothField(
        value=lambda p: np.zeros((np.atleast_2d(p).shape[0], 3)),
        div=lambda p: np.zeros(np.atleast_2d(p).shape[0]),
    )
    rf = K.resolvent_convolve(2.0, zero, region)
    pts = np.array([[0.0, 0.0, 1.0]])
    assert_allclose(rf.velocity(pts), 0.0, atol=1e-16)
    assert_allclose(rf.grad_pressure(pts), 0.0, atol=1e-16)
    ann = F.annulus_grid(1.1, 1.4, 3, F.sphere_grid(4))
    assert K.residual_resolvent(rf, ann) == 0.0


def test_convolution_linear_in_source():
    region = _region(2, 4)
    rng = np.random.default_rng(3)
    f1, f2 = F.random_bump_fields(rng, np.asarray(BOX), 2)
    lam = 2.0 + 1.0j
    pts = rng.standard_normal((6, 3)) * 0.5
    u1 = K.resolvent_convolve(lam, f1, region).velocity(pts)
    u2 = K.resolvent_convolve(lam, f2, region).velocity(pts)
    both = F.SmoothField(
        value=lambda p: f1(p) + f2(p),
        div=lambda p: f1.div(p) + f2.div(p),
    )
    u12 = K.resolvent_convolve(lam, both, region).velocity(pts)
    scale = np.max(np.abs(u12))
    assert_allclose(u12, u1 + u2, atol=1e-12 * scale)


def test_residual_small_far_field_and_fourth_order_in_h():
    # the discrete field satisfies the resolvent system exactly away from
    # the source nodes, so the measured residual is purely the stencil
    # truncation error and must drop like h^4
    region = _region(2, 6)
    rf = K.resolvent_convolve(1.0, _curl_source(), region)
    ann = F.annulus_grid(1.1, 1.4, 4, F.sphere_grid(6))
    res_coarse = K.residual_resolvent(rf, ann, h=0.08)
    res_fine = K.residual_resolvent(rf, ann, h=0.04)
    assert res_fine <= 1e-3
    assert res_coarse / res_fine >= 4.0


class _HalfSpaceCorruption:
    """Velocity scaled by 1+1e-2 where x1 > 0; must trip the residual."""

    def __init__(self, base):
        self.base = base
        self.lam = base.lam
        self.region = base.region

    def velocity(self, pts):
        u = self.base.velocity(pts)
        u[np.atleast_2d(pts)[:, 0] > 0.0] *= 1.01
        return u

    def grad_pressure(self, pts):
        return self.base.grad_pressure(pts)


def test_residual_detects_corrupted_field():
    region = _region(2, 5)
    rf = K.resolvent_convolve(1.0, _curl_source(), region)
    ann = F.annulus_grid(1.1, 1.4, 4, F.sphere_grid(6))
    assert K.residual_resolvent(rf, ann, h=0.04) <= 1e-3
    assert K.residual_resolvent(_HalfSpaceCorruption(rf), ann, h=0.04) > 1e-3


def test_residual_rejects_grid_touching_support():
    region = _region(1, 3)
    rf = K.resolvent_convolve(1.0, _curl_source(), region)
    bad = type("G", (), {"points": np.array([[3.5, 3.5, 3.5]]), "weights": np.ones(1)})
    with pytest.raises(ValueError):
        K.residual_resolvent(rf, bad)


def test_residual_inside_support_with_self_cell_refinement():
    # div-free source, so lam*u - Lap(u) must reproduce f even at points
    # inside the source box once the self-cell rules are enabled
    region = _region(2, 6)
    fld = _curl_source()
    rf = K.resolvent_convolve(1.0, fld, region, near_order=6)
    pts = np.array([[3.5, 3.5, 3.5], [3.3, 3.6, 3.45], [3.52, 3.38, 3.61]])
    scale = float(np.max(np.abs(fld(region.nodes))))
    res = K.residual_values(rf, pts, h=0.035) - fld(pts)
    assert float(np.max(np.abs(res))) / scale <= 1e-3


def test_tensor_route_matches_divergence_route():
    # u = E*f + (1/lam) grad(Psi * div f) against the Green-tensor
    # contraction: same field through two independent quadrature identities.
    # Cell-aligned bumps keep both rules exact for the polynomial factor.
    region = _region(2, 8)
    rng = np.random.default_rng(9)
    bump = F.TensorBump.for_cell(region.cell_bounds[2])
    fld = F.bump_direction_field(bump, np.array([0.3, -0.5, 0.81]))
    lam = 2.0 - 1.0j
    pts = rng.standard_normal((10, 3)) * 0.4
    u = K.resolvent_convolve(lam, fld, region).velocity(pts)
    gamma = K.resolvent_tensor(lam, pts[:, None, :] - region.nodes[None, :, :])
    f_vals = fld(region.nodes)
    u_tensor = np.einsum("tnij,n,nj->ti", gamma, region.weights, f_vals)
    assert_allclose(u, u_tensor, atol=1e-10 * np.max(np.abs(u)))


def _aligned_random_source(region, rng):
    """Random combination of cell-aligned bump x direction dictionary fields."""
    cells = rng.choice(region.n_cells, size=3, replace=False)
    parts = []
    for ci in cells:
        bump = F.TensorBump.for_cell(region.cell_bounds[ci])
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        parts.append(F.bump_direction_field(bump, direction, rng.standard_normal()))

    def value(p):
        return sum(f(p) for f in parts)

    def div(p):
        return sum(f.div(p) for f in parts)

    return F.SmoothField(value=value, div=div)


def test_adjoint_identity_dual_route():
    region = _region(2, 8)
    ball = F.ball_grid(1.0, 5, F.sphere_grid(8))
    rng = np.random.default_rng(17)
    for lam in (1.0, 2.0 * np.exp(3j * np.pi / 4.0), 4.0j):
        fld = _aligned_random_source(region, rng)
        v_vals = rng.standard_normal((ball.n_points, 3)) + 1j * rng.standard_normal(
            (ball.n_points, 3)
        )
        v = F.VectorFieldSample(ball.points, ball.weights, v_vals, tag="ball")
        u = K.resolvent_convolve(lam, fld, region).velocity(ball.points)
        Af = v.with_values(u)
        lhs = F.field_inner(Af, v)
        astar = K.adjoint_apply(lam, v, region.nodes)
        f_vals = fld(region.nodes)
        rhs = complex(np.sum(region.weights[:, None] * f_vals * np.conj(astar)))
        scale = F.field_norm(Af) * F.field_norm(v) + 1e-300
        assert abs(lhs - rhs) <= 1e-8 * scale


def test_far_field_decays_at_resolvent_rate():
    region = _region(2, 5)
    fld = _curl_source()
    center = np.full(3, 3.5)
    sph = F.sphere_grid(10)
    radii = np.linspace(5.0, 9.0, 9)
    for lam in (2.0, 1.0 + 2.0j):
        rf = K.resolvent_convolve(lam, fld, region)
        # divide the L2 sphere norms by r: the fit wants pointwise-amplitude
        # scaling, and the surface Jacobian contributes one extra r factor
        norms = K.sphere_norms(rf.velocity, center, radii, sph) / radii
        rate, _, _ = K.far_decay_fit(radii, norms)
        want = np.sqrt(complex(lam)).real
        assert abs(rate - want) <= 0.1 * want


# ---------------------------------------------------------------------------
# one-channel radial solve
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("l,lam", [(0, 2.0), (1, 1.0 + 1.0j), (3, 5.0 - 2.0j)])
def test_radial_green_manufactured_solution(l, lam):
    # u = r^l exp(-r^2) solves (lam - Lap_l) u = g with g computed
    # symbolically; the quadrature must reproduce u from g
    def g(r):
        r = np.asarray(r, dtype=float)
        return (lam + 4.0 * l + 6.0 - 4.0 * r**2) * r**l * np.exp(-(r**2))

    r_t = np.linspace(0.1, 5.0, 12)
    got = K.radial_green_apply(l, lam, g, s_max=8.0, r_targets=r_t)
    want = r_t**l * np.exp(-(r_t**2))
    assert_allclose(got, want, rtol=1e-12, atol=1e-14 * np.max(np.abs(want)))


def test_radial_green_zero_profile_and_validation():
    out = K.radial_green_apply(1, 2.0, lambda r: np.zeros_like(r), 4.0, np.array([1.0]))
    assert_allclose(out, 0.0, atol=1e-18)
    with pytest.raises(ValueError):
        K.radial_green_apply(0, 1.0, lambda r: r, 4.0, np.array([-1.0]))


# ---------------------------------------------------------------------------
# scale-invariant ratio report
# ---------------------------------------------------------------------------


def _source_sample(region, fld):
    return F.VectorFieldSample(
        region.nodes, region.weights, fld(region.nodes), tag="source-box"
    )


def test_lemma22_ratios_bounded_over_sweep():
    region = _region(2, 5)
    bump = F.TensorBump(center=np.full(3, 3.5), halfwidth=np.full(3, 0.45))
    fld = F.bump_direction_field(bump, np.array([1.0, 0.0, 0.0]))
    sample = _source_sample(region, fld)
    base = F.annulus_grid(1.1, 1.4, 4, F.sphere_grid(8))
    probe = type(base)(
        r_nodes=base.r_nodes,
        r_weights=base.r_weights,
        sphere=base.sphere,
        points=base.points + 3.5,
        weights=base.weights,
        interval=base.interval,
    )
    maxima = []
    for mag in (1.0, 4.0, 16.0, 64.0):
        lam = mag * np.exp(3j * np.pi / 4.0)
        rep = K.lemma22_ratios(lam, sample, probe)
        assert rep.defined
        maxima.append(max(rep.ratio_w, rep.ratio_grad, rep.ratio_hess))
    assert max(maxima) / min(maxima) < 10.0


def test_lemma22_zero_source_sentinel():
    region = _region(1, 3)
    sample = F.VectorFieldSample(
        region.nodes, region.weights, np.zeros((region.nodes.shape[0], 3))
    )
    probe = F.annulus_grid(1.1, 1.4, 3, F.sphere_grid(4))
    rep = K.lemma22_ratios(1.0, sample, probe)
    assert not rep.defined
    assert np.isnan(rep.ratio_w)


def test_lemma22_finite_for_random_source():
    region = _region(2, 4)
    rng = np.random.default_rng(23)
    (fld,) = F.random_bump_fields(rng, np.asarray(BOX), 1)
    sample = _source_sample(region, fld)
    probe = F.annulus_grid(1.1, 1.4, 3, F.sphere_grid(6))
    rep = K.lemma22_ratios(1.0, sample, probe)
    assert rep.defined
    for v in (rep.ratio_w, rep.ratio_grad, rep.ratio_hess):
        assert np.isfinite(v) and v > 0.0


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


def test_kernel_blocks_match_direct_formulas():
    lam = 2.0 + 0.5j
    targets = np.array([[0.1, 0.2, -0.3]])
    nodes = np.array([[3.2, 3.7, 3.4], [3.9, 3.1, 3.8]])
    E, psi_dir = K.kernel_blocks(lam, targets, nodes)
    assert E.shape == (1, 2) and psi_dir.shape == (1, 2, 3)
    d = targets[0] - nodes[0]
    r = np.linalg.norm(d)
    assert_allclose(E[0, 0], complex(K.helmholtz_green(lam, r)), rtol=1e-14)
    assert_allclose(
        psi_dir[0, 0], d / r * complex(K.psi_prime(lam, r)), rtol=1e-14
    )


def test_sphere_norms_of_constant_field():
    sph = F.sphere_grid(8)
    closure = lambda pts: np.tile([1.0, 0.0, 0.0], (np.atleast_2d(pts).shape[0], 1))
    norms = K.sphere_norms(closure, np.zeros(3), [1.0, 2.0], sph)
    assert_allclose(norms, np.sqrt(4.0 * np.pi) * np.array([1.0, 2.0]), rtol=1e-12)


def test_make_field_sample_round_trip():
    region = _region(1, 3)
    rf = K.resolvent_convolve(1.0, _curl_source(), region)
    ball = F.ball_grid(1.0, 3, F.sphere_grid(4))
    sample = K.make_field_sample(rf, ball, tag="ball")
    assert sample.values.shape == (ball.n_points, 3)
    assert_allclose(sample.values, rf.velocity(ball.points), rtol=1e-15)
