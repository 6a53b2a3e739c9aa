"""Sector-restricted special functions and vector spherical harmonics.

Half-integer modified Bessel functions are evaluated through their closed
elementary forms (orders +-1/2) combined with a Miller-style backward
recurrence for higher orders; both unscaled and exponentially scaled
variants are provided.  Certified piecewise majorants for the growth and
decay of those functions, the scalar/vector spherical harmonic bases, and
the surface Laplace-Beltrami relation matrices live here as well.

All complex square roots are principal-branch, and resolvent parameters are
restricted to a sector ``|arg(lam)| <= pi - delta`` away from the negative
real axis.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import BesselOverflowError

__all__ = [
    "SectorPoint",
    "SphericalIndex",
    "angular_eigenvalue",
    "bessel_decay_bound",
    "bessel_growth_bound",
    "bessel_i_half",
    "bessel_i_half_scaled",
    "bessel_k_half",
    "bessel_k_half_scaled",
    "bessel_i_half_deriv",
    "bessel_k_half_deriv",
    "scalar_sph",
    "sector_constant",
    "selftest",
    "sph_table",
    "sqrt_principal",
    "unit_vectors",
    "vsh_eval",
    "vsh_relation_matrices",
    "wronskian_residual",
]

#: Default cap on Re(z) before unscaled Bessel evaluation refuses to run.
OVERFLOW_CAP = 700.0

#: Default constant seeding the piecewise Bessel majorants.
BOUND_CONST = 4.0

_MILLER_LOG_TOL = -45.0  # log contamination target for backward recurrence
_RESCALE_LIMIT = 1e250


def sqrt_principal(lam):
    """Principal branch square root with Re(result) >= 0.

    Raises ``ValueError`` on the closed negative real axis where the branch
    cut would make the sector estimates meaningless.
    """
    lam = complex(lam)
    if lam.imag == 0.0 and lam.real <= 0.0:
        raise ValueError(f"sqrt_principal undefined on (-inf, 0]: lam={lam}")
    w = np.sqrt(complex(lam))
    return complex(w)


def sector_constant(delta):
    """Growth constant 1/cos((pi - delta)/2) attached to the sector."""
    if not 0.0 < delta < np.pi:
        raise ValueError(f"sector margin delta must lie in (0, pi): {delta}")
    return 1.0 / np.cos((np.pi - delta) / 2.0)


@dataclass(frozen=True)
class SectorPoint:
    """Resolvent parameter in the sector |arg lam| <= pi - delta, |lam| >= 1.

    Carries the principal square root so downstream formulas agree on the
    branch.  Points exactly on the sector boundary (contour rays) are
    accepted.
    """

    lam: complex
    delta: float = np.pi / 4
    sqrt_lam: complex = field(init=False)

    def __post_init__(self):
        lam = complex(self.lam)
        if abs(lam) < 1.0 - 1e-12:
            raise ValueError(f"|lam| >= 1 required, got {abs(lam):.6g}")
        if abs(np.angle(lam)) > np.pi - self.delta + 1e-12:
            raise ValueError(
                f"lam={lam:.6g} outside sector |arg| <= pi - {self.delta:.6g}"
            )
        w = sqrt_principal(lam)
        # Principal root of a sector point keeps a positive real part with a
        # quantitative margin; re-derive it instead of trusting the caller.
        margin = abs(w) * np.cos((np.pi - self.delta) / 2.0)
        if w.real < margin - 1e-12 * abs(w):
            raise ValueError(f"sqrt {w:.6g} lost the sector margin {margin:.6g}")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "sqrt_lam", w)

    @property
    def bracket(self):
        """Japanese bracket (1 + |lam|^2)^(1/2)."""
        return float(np.hypot(1.0, abs(self.lam)))


@dataclass(frozen=True)
class SphericalIndex:
    """Spherical harmonic index pair (degree l, order m)."""

    l: int
    m: int

    def __post_init__(self):
        if self.l < 0 or abs(self.m) > self.l:
            raise ValueError(f"invalid spherical index (l={self.l}, m={self.m})")


def angular_eigenvalue(l):
    """Laplace-Beltrami eigenvalue l(l+1) on the unit sphere."""
    if l < 0:
        raise ValueError(f"degree must be >= 0, got {l}")
    return float(l * (l + 1))


# ---------------------------------------------------------------------------
# Modified Bessel functions of half-integer order
# ---------------------------------------------------------------------------


def _as_z_array(z):
    z = np.asarray(z, dtype=complex)
    if np.any(z.real <= 0.0):
        raise ValueError("bessel evaluation requires Re(z) > 0")
    return z


def _bessel_i_seeds_scaled(z):
    """Scaled orders -1/2 and +1/2: returns I_nu(z) * exp(-Re z)."""
    pref = np.sqrt(2.0 / (np.pi * z))
    # exp(z - Re z) and exp(-z - Re z) both have non-positive real exponent
    ep = np.exp(1j * z.imag)
    em = np.exp(-z - z.real)
    i_minus = pref * 0.5 * (ep + em)  # cosh(z) scaled
    i_plus = pref * 0.5 * (ep - em)  # sinh(z) scaled
    return i_minus, i_plus


def _miller_start_order(l, zmax):
    """Starting order for the backward recurrence.

    Chosen so the contamination of the dominant solution, estimated through
    the product of the downward amplification factors, drops below the
    target in double precision.
    """
    n = l + 2
    acc = 0.0
    while True:
        acc += 2.0 * np.log(zmax / (2.0 * n + 1.0))
        n += 1
        if acc < _MILLER_LOG_TOL and n > l + 4:
            return n
        if n > l + 10000:
            raise RuntimeError("backward recurrence start order diverged")


def _bessel_i_half_scaled_many(ls, z):
    """Scaled I_{l+1/2}(z)*exp(-Re z) for every l in ``ls`` at once.

    Backward (Miller) recurrence normalised against the closed form at
    order 1/2.  Orders -1 and 0 come straight from the seeds.
    """
    z = _as_z_array(z)
    ls = sorted(set(int(l) for l in ls))
    if ls and ls[0] < -1:
        raise ValueError(f"order index l >= -1 required, got {ls[0]}")
    i_minus, i_plus = _bessel_i_seeds_scaled(z)
    out = {}
    if -1 in ls:
        out[-1] = i_minus
    if 0 in ls:
        out[0] = i_plus
    want = [l for l in ls if l >= 1]
    if not want:
        return out
    lmax = max(want)
    zmax = float(np.max(np.abs(z))) if z.size else 1.0
    n_start = _miller_start_order(lmax, max(zmax, 1e-30))

    t_up = np.zeros_like(z)  # trial value at order nu+1
    t_cur = np.full_like(z, 1e-280)  # trial value at order nu = n_start + 1/2
    resc = np.zeros(z.shape, dtype=float)  # accumulated log rescale
    captured = {}
    want_set = set(want)
    for n in range(n_start, 0, -1):
        # step from orders (n+1+1/2, n+1/2) down to n-1/2
        nu = n + 0.5
        t_down = t_up + (2.0 * nu / z) * t_cur
        t_up, t_cur = t_cur, t_down
        big = np.abs(t_cur) > _RESCALE_LIMIT
        if np.any(big):
            t_cur = np.where(big, t_cur * 1e-250, t_cur)
            t_up = np.where(big, t_up * 1e-250, t_up)
            resc = np.where(big, resc + np.log(1e-250), resc)
        if n - 1 in want_set:
            captured[n - 1] = (t_cur.copy(), resc.copy())
        # after the final iteration t_cur holds order 1/2
    t_half, resc_half = t_cur, resc
    ratio = i_plus / t_half
    for l in want:
        t_l, resc_l = captured[l]
        out[l] = t_l * ratio * np.exp(resc_half - resc_l)
    return out


def bessel_i_half_scaled(l, z):
    """Scaled modified Bessel I of order l + 1/2.

    Returns ``(mantissa, scale)`` with ``I_{l+1/2}(z) = mantissa * exp(scale)``
    and ``scale = Re(z)``, so the mantissa stays bounded for large arguments.
    """
    z_arr = _as_z_array(z)
    mant = _bessel_i_half_scaled_many([l], z_arr)[int(l)]
    scale = z_arr.real.astype(float)
    if np.isscalar(z) or np.ndim(z) == 0:
        return complex(mant), float(scale)
    return mant, scale


def bessel_i_half(l, z, cap=OVERFLOW_CAP):
    """Modified Bessel I of order l + 1/2 for Re(z) > 0, l >= -1."""
    mant, scale = bessel_i_half_scaled(l, z)
    smax = float(np.max(scale))
    if smax > cap:
        raise BesselOverflowError(smax, cap)
    return mant * np.exp(scale)


def _k_poly_coeffs(l):
    """Coefficients (l+k)! / (2^k k! (l-k)!) of the terminating K series."""
    a = np.empty(l + 1)
    a[0] = 1.0
    for k in range(l):
        a[k + 1] = a[k] * (l + k + 1) * (l - k) / (2.0 * (k + 1))
    return a


def bessel_k_half_scaled(l, z):
    """Scaled modified Bessel K of order l + 1/2.

    Returns ``(mantissa, scale)`` with ``K_{l+1/2}(z) = mantissa * exp(scale)``
    and ``scale = -Re(z)``.  The terminating sum is exact for half-integer
    orders; K is even in its order so l = -1 reuses l = 0.
    """
    if l < -1:
        raise ValueError(f"order index l >= -1 required, got {l}")
    leff = max(int(l), 0)
    z_arr = _as_z_array(z)
    a = _k_poly_coeffs(leff)
    zinv = 1.0 / z_arr
    # Horner in 1/z
    s = np.zeros_like(z_arr)
    for k in range(leff, 0, -1):
        s = (s + a[k]) * zinv
    s = s + a[0]
    mant = np.sqrt(np.pi / (2.0 * z_arr)) * np.exp(-1j * z_arr.imag) * s
    scale = -z_arr.real.astype(float)
    if np.isscalar(z) or np.ndim(z) == 0:
        return complex(mant), float(scale)
    return mant, scale


def bessel_k_half(l, z, cap=OVERFLOW_CAP):
    """Modified Bessel K of order l + 1/2 for Re(z) > 0, l >= -1."""
    mant, scale = bessel_k_half_scaled(l, z)
    if np.max(np.abs(scale)) > cap:
        raise BesselOverflowError(float(np.max(np.abs(scale))), cap)
    return mant * np.exp(scale)


def bessel_i_half_deriv(l, z):
    """d/dz I_{l+1/2}(z) via I'_nu = I_{nu-1} - (nu/z) I_nu."""
    z_arr = _as_z_array(z)
    nu = l + 0.5
    vals = _bessel_i_half_scaled_many([l - 1, l], z_arr)
    mant = vals[l - 1] - (nu / z_arr) * vals[l]
    out = mant * np.exp(z_arr.real)
    if np.isscalar(z) or np.ndim(z) == 0:
        return complex(out)
    return out


def bessel_k_half_deriv(l, z):
    """d/dz K_{l+1/2}(z) via K'_nu = -K_{nu-1} - (nu/z) K_nu."""
    z_arr = _as_z_array(z)
    nu = l + 0.5
    km1, sc = bessel_k_half_scaled(l - 1, z_arr)
    k0, _ = bessel_k_half_scaled(l, z_arr)
    mant = -km1 - (nu / z_arr) * k0
    out = mant * np.exp(sc)
    if np.isscalar(z) or np.ndim(z) == 0:
        return complex(out)
    return out


def wronskian_residual(l, z):
    """I_nu(z) K'_nu(z) - I'_nu(z) K_nu(z) + 1/z, which should vanish."""
    i0 = bessel_i_half(l, z)
    k0 = bessel_k_half(l, z)
    i1 = bessel_i_half_deriv(l, z)
    k1 = bessel_k_half_deriv(l, z)
    return i0 * k1 - i1 * k0 + 1.0 / np.asarray(z, dtype=complex)


def _resolve_sqrt(lam):
    if isinstance(lam, SectorPoint):
        return lam.sqrt_lam
    return sqrt_principal(lam)


def bessel_growth_bound(l, lam, r, const=BOUND_CONST):
    """Piecewise majorant of |I_{l+1/2}(sqrt(lam) r)| on the sector.

    Below the breakpoint r = 1/Re(sqrt lam) the bound is algebraic of order
    l + 1/2; beyond it the bound carries the exponential growth factor.
    ``const`` must dominate the sector constant of the evaluation points.
    """
    w = _resolve_sqrt(lam)
    x = w.real * np.asarray(r, dtype=float)
    nu = l + 0.5
    small = const**nu * x**nu
    large = const**nu * x ** (-0.5) * np.exp(x)
    out = np.where(x <= 1.0, small, large)
    if np.ndim(r) == 0:
        return float(out)
    return out


def bessel_decay_bound(l, lam, r, const=BOUND_CONST):
    """Piecewise majorant of |K_{l+1/2}(sqrt(lam) r)| on the sector.

    Algebraic blow-up of order -(l + 1/2) below the breakpoint, exponential
    decay beyond it, both anchored at K_{l+1/2}(1).
    """
    w = _resolve_sqrt(lam)
    x = w.real * np.asarray(r, dtype=float)
    nu = l + 0.5
    k1 = abs(bessel_k_half(l, 1.0))
    small = const * k1 * x ** (-nu)
    large = const * k1 * x ** (-0.5) * np.exp(-x)
    out = np.where(x <= 1.0, small, large)
    if np.ndim(r) == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# Scalar and vector spherical harmonics
# ---------------------------------------------------------------------------


def _legendre_norm_table(lmax, x):
    """Fully normalised associated Legendre values on x = cos(theta).

    Returns ``P[l][m]`` as a dense array of shape (lmax+1, lmax+1, n) with
    the Condon-Shortley phase folded in, normalised so that the squared
    surface integral of P e^(i m phi) is one.
    """
    x = np.asarray(x, dtype=float)
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    out = np.zeros((lmax + 1, lmax + 1) + x.shape)
    out[0, 0] = np.full_like(x, np.sqrt(1.0 / (4.0 * np.pi)))
    # sectoral band
    for m in range(1, lmax + 1):
        out[m, m] = (
            -np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * sin_t * out[m - 1, m - 1]
        )
    # first super-diagonal, then upward recurrence in l
    for m in range(0, lmax):
        out[m + 1, m] = np.sqrt(2.0 * m + 3.0) * x * out[m, m]
    for m in range(0, lmax + 1):
        for l in range(m + 2, lmax + 1):
            a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = np.sqrt(
                (2.0 * l + 1.0)
                / (2.0 * l - 3.0)
                * ((l - 1.0) ** 2 - m * m)
                / (l * l - m * m)
            )
            out[l, m] = a * x * out[l - 1, m] - b * out[l - 2, m]
    return out


def _legendre_theta_deriv(lmax, x, table):
    """d/dtheta of the normalised Legendre table (same layout)."""
    x = np.asarray(x, dtype=float)
    sin_t = np.sqrt(np.maximum(1e-300, 1.0 - x * x))
    cot_t = x / sin_t
    out = np.zeros_like(table)
    for m in range(0, lmax + 1):
        for l in range(m, lmax + 1):
            term = l * cot_t * table[l, m]
            if l > m:
                c = np.sqrt(
                    (2.0 * l + 1.0) / (2.0 * l - 1.0) * (l * l - m * m)
                )
                term = term - c * table[l - 1, m] / sin_t
            out[l, m] = term
    return out


def sph_table(lmax, theta, phi):
    """Scalar harmonics and their theta-derivatives for all l <= lmax.

    Returns a dict with complex arrays ``Y[(l, m)]`` and ``dY_dtheta[(l, m)]``
    over the broadcast point set, covering negative orders through the
    conjugation symmetry.
    """
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    x = np.cos(theta)
    table = _legendre_norm_table(lmax, x)
    dtable = _legendre_theta_deriv(lmax, x, table)
    ys = {}
    dys = {}
    for m in range(0, lmax + 1):
        e = np.exp(1j * m * phi)
        for l in range(m, lmax + 1):
            ys[(l, m)] = table[l, m] * e
            dys[(l, m)] = dtable[l, m] * e
            if m > 0:
                sgn = -1.0 if (m % 2) else 1.0
                ys[(l, -m)] = sgn * np.conj(ys[(l, m)])
                dys[(l, -m)] = sgn * np.conj(dys[(l, m)])
    return {"Y": ys, "dY_dtheta": dys}


def scalar_sph(l, m, theta, phi):
    """Orthonormal complex spherical harmonic Y_lm(theta, phi)."""
    SphericalIndex(l, m)
    tab = sph_table(l, theta, phi)
    return tab["Y"][(l, m)]


def unit_vectors(theta, phi):
    """Cartesian spherical frame (r_hat, theta_hat, phi_hat).

    Shapes broadcast over the inputs with a trailing component axis.
    """
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    r_hat = np.stack([st * cp, st * sp, ct], axis=-1)
    t_hat = np.stack([ct * cp, ct * sp, -st], axis=-1)
    p_hat = np.stack([-sp, cp, np.zeros_like(sp)], axis=-1)
    return r_hat, t_hat, p_hat


def vsh_eval(l, m, theta, phi):
    """Vector spherical harmonic triple (radial, gradient, rotational).

    Returns Cartesian component arrays ``(Yvec, Psi, Phi)`` with trailing
    axis 3, where Yvec = Y r_hat, Psi = r grad Y restricted to the sphere,
    and Phi = r_hat x Psi.  Requires l >= 1 for the tangential channels.
    """
    SphericalIndex(l, m)
    if l < 1:
        raise ValueError("tangential harmonics require l >= 1")
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    tab = sph_table(l, theta, phi)
    y = tab["Y"][(l, m)]
    dy = tab["dY_dtheta"][(l, m)]
    r_hat, t_hat, p_hat = unit_vectors(theta, phi)
    if m == 0:
        y_over_sin = np.zeros_like(y)
    else:
        y_over_sin = 1j * m * y / np.maximum(np.sin(theta), 1e-300)
    yvec = y[..., None] * r_hat
    psi = dy[..., None] * t_hat + y_over_sin[..., None] * p_hat
    phi_field = -y_over_sin[..., None] * t_hat + dy[..., None] * p_hat
    return yvec, psi, phi_field


def vsh_relation_matrices(l):
    """Surface Laplacian action and its inverse on the harmonic triple.

    The first matrix maps (Yvec, Psi, Phi) coefficients to those of their
    surface Laplacians; the second undoes it (after division by l(l+1)).
    Their product is the identity for every l >= 2.
    """
    mu = angular_eigenvalue(l)
    if mu <= 2.0:
        raise ValueError("relation matrices need l >= 2 (mu_l > 2)")
    forward = np.array(
        [
            [-(mu + 2.0), 2.0 * mu, 0.0],
            [2.0, -mu, 0.0],
            [0.0, 0.0, -mu],
        ]
    )
    inverse = (
        np.array(
            [
                [-mu / (mu - 2.0), -2.0 * mu / (mu - 2.0), 0.0],
                [-2.0 / (mu - 2.0), -(mu + 2.0) / (mu - 2.0), 0.0],
                [0.0, 0.0, -1.0],
            ]
        )
        / mu
    )
    return forward, inverse


# ---------------------------------------------------------------------------
# Invariant suite
# ---------------------------------------------------------------------------


def selftest(rng=None):
    """Run the module's invariant checks; returns {name: (ok, value)}."""
    rng = np.random.default_rng(0 if rng is None else rng)
    report = {}

    zs = np.array([0.5 + 0.0j, 1.0 + 0.5j, 3.0 - 2.0j, 10.0 + 6.0j, 30.0 + 1.0j])
    worst = 0.0
    for l in range(0, 21, 4):
        res = wronskian_residual(l, zs)
        kk = np.abs(bessel_k_half(l, zs) * bessel_i_half_deriv(l, zs))
        worst = max(worst, float(np.max(np.abs(res) / np.maximum(kk, 1e-300))))
    report["bessel_wronskian"] = (worst < 1e-10, worst)

    worst = 0.0
    for l in range(0, 11, 2):
        for lam in (1.0 + 0.0j, 4.0 + 3.0j, 2.0 - 2.0j):
            w = sqrt_principal(lam)
            r = np.linspace(0.05, 20.0, 50)
            iv = np.abs(bessel_i_half(l, w * r))
            kv = np.abs(bessel_k_half(l, w * r))
            ib = bessel_growth_bound(l, lam, r)
            kb = bessel_decay_bound(l, lam, r)
            worst = max(worst, float(np.max(iv / ib)), float(np.max(kv / kb)))
    report["bessel_majorants"] = (worst <= 1.0 + 1e-12, worst)

    worst = 0.0
    for l in range(2, 11):
        fw, inv = vsh_relation_matrices(l)
        worst = max(worst, float(np.max(np.abs(inv @ fw - np.eye(3)))))
    report["vsh_relation_inverse"] = (worst < 1e-12, worst)

    return report
