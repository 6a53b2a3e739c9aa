"""Geometry, quadrature grids, sampled fields, and the Helmholtz projection.

Everything downstream works with explicit quadrature grids: tensor
Gauss-Legendre cells on the source box, Gauss-Legendre-in-cos(theta) sphere
grids, and product ball/annulus grids.  Sampled vector fields carry their
quadrature weights so inner products are plain weighted sums.

The Helmholtz projection is realised through the Newtonian potential of the
source divergence, evaluated by direct quadrature with a polar refinement
for cells close to the evaluation point.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import GridMismatchError, QuadratureRefinementError

__all__ = [
    "Geometry",
    "RadialProfile",
    "SmoothField",
    "SourceRegionGrid",
    "SphereGrid",
    "TensorBump",
    "VectorFieldSample",
    "VolumeGrid",
    "annulus_grid",
    "ball_grid",
    "box_cell_quadrature",
    "divergence",
    "field_inner",
    "field_norm",
    "gradient_fd",
    "helmholtz_project",
    "laplacian_fd",
    "lattice_divergence",
    "newtonian_gradient",
    "radial_gl",
    "radial_inner",
    "radial_norm",
    "random_bump_fields",
    "singular_cell_integral",
    "singular_quadrature",
    "source_region_grid",
    "sphere_grid",
    "to_spherical",
]


@dataclass(frozen=True)
class Geometry:
    """Fixed spatial layout: unit ball target, expansion ball, source box.

    ``rho`` is the radius of the expansion ball around the target unit ball,
    ``big_radius`` a larger ball the source box must stay clear of, and
    ``outer_radius`` a ball containing everything.
    """

    rho: float = 1.5
    big_radius: float = 2.0
    source_box: tuple = ((3.0, 4.0), (3.0, 4.0), (3.0, 4.0))
    outer_radius: float = 8.0

    def __post_init__(self):
        if not 1.0 < self.rho:
            raise ValueError("expansion radius rho must exceed 1")
        if not self.rho < self.big_radius:
            raise ValueError("need rho < big_radius")
        lo = np.array([b[0] for b in self.source_box], dtype=float)
        hi = np.array([b[1] for b in self.source_box], dtype=float)
        if np.any(hi <= lo):
            raise ValueError("source box must have positive extent")
        nearest = np.linalg.norm(np.maximum(lo, np.minimum(0.0, hi)))
        if nearest <= self.big_radius:
            raise ValueError("source box intersects the protected ball")
        farthest = np.linalg.norm(np.maximum(np.abs(lo), np.abs(hi)))
        if farthest >= self.outer_radius:
            raise ValueError("source box leaves the outer ball")

    @property
    def box_bounds(self):
        return np.asarray(self.source_box, dtype=float)


def to_spherical(points):
    """Cartesian points (N, 3) -> (r, theta, phi)."""
    pts = np.asarray(points, dtype=float)
    r = np.linalg.norm(pts, axis=-1)
    theta = np.arccos(np.clip(pts[..., 2] / np.maximum(r, 1e-300), -1.0, 1.0))
    phi = np.arctan2(pts[..., 1], pts[..., 0])
    return r, theta, phi


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SphereGrid:
    """Gauss-Legendre in cos(theta) crossed with uniform phi.

    Exact for spherical-harmonic products up to the grid degree.  Arrays are
    flattened theta-major; ``weights`` sum to 4 pi.
    """

    n_theta: int
    n_phi: int
    theta: np.ndarray
    phi: np.ndarray
    weights: np.ndarray

    @property
    def n_points(self):
        return self.theta.size


def sphere_grid(n_theta, n_phi=None):
    if n_phi is None:
        n_phi = 2 * n_theta
    x, w = leggauss(n_theta)
    theta = np.arccos(x[::-1])
    wt = w[::-1]
    phi = np.arange(n_phi) * (2.0 * np.pi / n_phi)
    th2, ph2 = np.meshgrid(theta, phi, indexing="ij")
    w2 = np.broadcast_to((wt * 2.0 * np.pi / n_phi)[:, None], th2.shape)
    g = SphereGrid(
        n_theta=n_theta,
        n_phi=n_phi,
        theta=th2.ravel().copy(),
        phi=ph2.ravel().copy(),
        weights=w2.ravel().copy(),
    )
    assert abs(g.weights.sum() - 4.0 * np.pi) < 1e-9
    return g


def radial_gl(a, b, n):
    """Gauss-Legendre nodes/weights on (a, b); weights exclude the r^2 factor."""
    x, w = leggauss(n)
    r = 0.5 * (b - a) * x + 0.5 * (a + b)
    return r, 0.5 * (b - a) * w


@dataclass(frozen=True)
class VolumeGrid:
    """Product grid over a radial interval times a sphere grid.

    ``points`` has shape (n_r * n_sphere, 3), radial-major, and ``weights``
    include the r^2 Jacobian, so plain weighted sums are volume integrals.
    """

    r_nodes: np.ndarray
    r_weights: np.ndarray
    sphere: SphereGrid
    points: np.ndarray
    weights: np.ndarray
    interval: tuple

    @property
    def n_points(self):
        return self.points.shape[0]

    def per_radius(self, values):
        """Reshape flat samples to (n_r, n_sphere, ...)."""
        return np.reshape(values, (self.r_nodes.size, self.sphere.n_points) + values.shape[1:])


def _product_grid(r_nodes, r_weights, sph, interval):
    from .specfun import unit_vectors

    r_hat, _, _ = unit_vectors(sph.theta, sph.phi)
    pts = r_nodes[:, None, None] * r_hat[None, :, :]
    w = (r_weights * r_nodes**2)[:, None] * sph.weights[None, :]
    return VolumeGrid(
        r_nodes=r_nodes,
        r_weights=r_weights,
        sphere=sph,
        points=pts.reshape(-1, 3),
        weights=w.ravel(),
        interval=interval,
    )


def ball_grid(radius, n_r, sph):
    r, w = radial_gl(0.0, radius, n_r)
    g = _product_grid(r, w, sph, (0.0, radius))
    assert abs(g.weights.sum() - 4.0 * np.pi * radius**3 / 3.0) < 1e-9 * radius**3
    return g


def annulus_grid(r_inner, r_outer, n_r, sph):
    if not 0.0 < r_inner < r_outer:
        raise ValueError("need 0 < r_inner < r_outer")
    r, w = radial_gl(r_inner, r_outer, n_r)
    return _product_grid(r, w, sph, (r_inner, r_outer))


def box_cell_quadrature(bounds, n_gl):
    """Tensor Gauss-Legendre nodes/weights over one axis-aligned cell."""
    bounds = np.asarray(bounds, dtype=float)
    axes = []
    wts = []
    for d in range(3):
        r, w = radial_gl(bounds[d, 0], bounds[d, 1], n_gl)
        axes.append(r)
        wts.append(w)
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    wx, wy, wz = np.meshgrid(*wts, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)
    return pts, (wx * wy * wz).ravel()


@dataclass(frozen=True)
class SourceRegionGrid:
    """Partition of the source box into cells with per-cell quadrature."""

    cell_bounds: np.ndarray  # (n_cells, 3, 2)
    nodes: np.ndarray  # concatenated (N, 3)
    weights: np.ndarray  # (N,)
    cell_slices: tuple  # slice per cell into the node arrays
    n_gl: int

    @property
    def n_cells(self):
        return self.cell_bounds.shape[0]


def source_region_grid(box_bounds, cells_per_axis, n_gl):
    box_bounds = np.asarray(box_bounds, dtype=float)
    edges = [
        np.linspace(box_bounds[d, 0], box_bounds[d, 1], cells_per_axis + 1)
        for d in range(3)
    ]
    bounds = []
    nodes = []
    weights = []
    slices = []
    offset = 0
    for i in range(cells_per_axis):
        for j in range(cells_per_axis):
            for k in range(cells_per_axis):
                cb = np.array(
                    [
                        [edges[0][i], edges[0][i + 1]],
                        [edges[1][j], edges[1][j + 1]],
                        [edges[2][k], edges[2][k + 1]],
                    ]
                )
                pts, w = box_cell_quadrature(cb, n_gl)
                bounds.append(cb)
                nodes.append(pts)
                weights.append(w)
                slices.append(slice(offset, offset + w.size))
                offset += w.size
    grid = SourceRegionGrid(
        cell_bounds=np.array(bounds),
        nodes=np.concatenate(nodes, axis=0),
        weights=np.concatenate(weights),
        cell_slices=tuple(slices),
        n_gl=n_gl,
    )
    vol = float(np.prod(box_bounds[:, 1] - box_bounds[:, 0]))
    assert abs(grid.weights.sum() - vol) < 1e-9 * vol
    return grid


# ---------------------------------------------------------------------------
# Sampled fields and inner products
# ---------------------------------------------------------------------------


@dataclass
class VectorFieldSample:
    """Complex 3-vector samples on a quadrature grid.

    ``measure``, when given, is the exact measure of the tagged region and is
    checked against the weight sum at construction.
    """

    points: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    tag: str = ""
    measure: float = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        self.values = np.asarray(self.values, dtype=complex)
        if self.points.shape != (self.weights.size, 3):
            raise ValueError("points must be (N, 3) matching weights")
        if self.values.shape != self.points.shape:
            raise ValueError("values must be (N, 3)")
        if np.any(self.weights <= 0.0):
            raise ValueError("quadrature weights must be positive")
        if self.measure is not None:
            s = self.weights.sum()
            if abs(s - self.measure) > 1e-6 * abs(self.measure):
                raise ValueError(
                    f"weights sum {s:.8g} != measure {self.measure:.8g} for {self.tag}"
                )

    def with_values(self, values):
        return VectorFieldSample(
            self.points, self.weights, values, tag=self.tag, measure=self.measure
        )


def _check_same_grid(a, b):
    if a.points is b.points:
        return
    if a.points.shape != b.points.shape or not np.array_equal(a.points, b.points):
        raise GridMismatchError(
            f"fields live on different grids ({a.tag!r} vs {b.tag!r})"
        )


def field_inner(a, b):
    """L2 inner product sum_i w_i a_i . conj(b_i) on a shared grid."""
    _check_same_grid(a, b)
    return complex(np.sum(a.weights[:, None] * a.values * np.conj(b.values)))


def field_norm(a):
    return float(np.sqrt(max(field_inner(a, a).real, 0.0)))


@dataclass
class RadialProfile:
    """Complex radial samples on Gauss-Legendre nodes of an interval."""

    r: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    interval: tuple

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        self.values = np.asarray(self.values, dtype=complex)
        if not (self.r.shape == self.weights.shape == self.values.shape):
            raise ValueError("radial profile arrays must share a shape")


def radial_inner(p, q):
    """Volume-weighted pairing int p conj(q) r^2 dr on a shared radial grid."""
    if p.r.shape != q.r.shape or not np.array_equal(p.r, q.r):
        raise GridMismatchError("radial profiles on different node sets")
    return complex(np.sum(p.weights * p.values * np.conj(q.values) * p.r**2))


def radial_norm(p):
    return float(np.sqrt(max(radial_inner(p, p).real, 0.0)))


# ---------------------------------------------------------------------------
# Smooth compactly supported fields
# ---------------------------------------------------------------------------


#: Default polynomial order of the bump profile (1 - s^2)^p.  The profile
#: is C^{p-1} at the support edge; a polynomial profile (rather than the
#: classical exp(-1/(1-s^2)) mollifier) keeps moderate-order Gauss-Legendre
#: rules accurate for kernel integrals -- the exponential bump's Laplacian
#: has boundary layers that defeat fixed-order quadrature.
BUMP_ORDER = 4


def _eta(s, p):
    """Compactly supported bump profile on (-1, 1), equal to 1 at 0."""
    u = np.maximum(1.0 - s * s, 0.0)
    return u**p


def _eta_prime(s, p):
    u = np.maximum(1.0 - s * s, 0.0)
    return -2.0 * p * s * u ** (p - 1)


@dataclass(frozen=True)
class TensorBump:
    """Product bump supported on an axis-aligned cell."""

    center: np.ndarray
    halfwidth: np.ndarray
    order: int = BUMP_ORDER

    @staticmethod
    def for_cell(bounds, shrink=1.0, order=BUMP_ORDER):
        bounds = np.asarray(bounds, dtype=float)
        c = bounds.mean(axis=1)
        h = 0.5 * (bounds[:, 1] - bounds[:, 0]) * shrink
        return TensorBump(center=c, halfwidth=h, order=order)

    def _s(self, points):
        pts = np.asarray(points, dtype=float)
        return (pts - self.center) / self.halfwidth

    def value(self, points):
        s = self._s(points)
        p = self.order
        return _eta(s[..., 0], p) * _eta(s[..., 1], p) * _eta(s[..., 2], p)

    def grad(self, points):
        s = self._s(points)
        p = self.order
        e = [_eta(s[..., d], p) for d in range(3)]
        ep = [_eta_prime(s[..., d], p) / self.halfwidth[d] for d in range(3)]
        return np.stack(
            [
                ep[0] * e[1] * e[2],
                e[0] * ep[1] * e[2],
                e[0] * e[1] * ep[2],
            ],
            axis=-1,
        )

    def laplacian(self, points):
        s = self._s(points)
        p = self.order
        e = [_eta(s[..., d], p) for d in range(3)]
        lap = np.zeros(s.shape[:-1])
        for d in range(3):
            lap = lap + _eta_second(s[..., d], p) / self.halfwidth[d] ** 2 * (
                e[(d + 1) % 3] * e[(d + 2) % 3]
            )
        return lap


@dataclass
class SmoothField:
    """Vector field given by closures, with an optional analytic divergence."""

    value: callable
    div: callable = None
    support: np.ndarray = None  # (3, 2) bounding box of the support

    def __call__(self, points):
        return np.asarray(self.value(points), dtype=complex)


def bump_direction_field(bump, direction, coefficient=1.0):
    """Bump times a constant unit direction; divergence is analytic."""
    direction = np.asarray(direction, dtype=float)

    def value(points):
        return coefficient * bump.value(points)[..., None] * direction

    def div(points):
        return coefficient * bump.grad(points) @ direction

    sup = np.stack(
        [bump.center - bump.halfwidth, bump.center + bump.halfwidth], axis=1
    )
    return SmoothField(value=value, div=div, support=sup)


def bump_curl_field(bump, direction, coefficient=1.0):
    """curl(bump * e_d): divergence-free by construction."""
    direction = np.asarray(direction, dtype=float)

    def value(points):
        return coefficient * np.cross(bump.grad(points), direction)

    def div(points):
        pts = np.asarray(points, dtype=float)
        return np.zeros(pts.shape[:-1], dtype=complex)

    sup = np.stack(
        [bump.center - bump.halfwidth, bump.center + bump.halfwidth], axis=1
    )
    return SmoothField(value=value, div=div, support=sup)


def gradient_bump_field(bump, coefficient=1.0):
    """Pure gradient field grad(bump); its projection must vanish."""

    def value(points):
        return coefficient * bump.grad(points)

    def div(points):
        return coefficient * bump.laplacian(points).astype(complex)

    sup = np.stack(
        [bump.center - bump.halfwidth, bump.center + bump.halfwidth], axis=1
    )
    return SmoothField(value=value, div=div, support=sup)


def _eta_second(s, p):
    u = np.maximum(1.0 - s * s, 0.0)
    return -2.0 * p * u ** (p - 1) + 4.0 * p * (p - 1) * s * s * u ** (p - 2)


def random_bump_fields(rng, box_bounds, count, vector=True):
    """Random smooth bumps supported strictly inside a box (test helpers)."""
    box_bounds = np.asarray(box_bounds, dtype=float)
    width = box_bounds[:, 1] - box_bounds[:, 0]
    fields = []
    for _ in range(count):
        hw = (0.15 + 0.2 * rng.random(3)) * width
        lo = box_bounds[:, 0] + hw
        hi = box_bounds[:, 1] - hw
        c = lo + rng.random(3) * (hi - lo)
        bump = TensorBump(center=c, halfwidth=hw)
        if vector:
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            fields.append(bump_direction_field(bump, direction))
        else:
            fields.append(bump)
    return fields


# ---------------------------------------------------------------------------
# Divergence
# ---------------------------------------------------------------------------


def divergence(fld, points):
    """Divergence of a field at the given points.

    Uses the analytic closure when the field carries one; raw samples must
    go through :func:`lattice_divergence` instead.
    """
    if isinstance(fld, SmoothField) and fld.div is not None:
        return np.asarray(fld.div(points), dtype=complex)
    raise ValueError("no analytic divergence; use lattice_divergence for samples")


def lattice_divergence(lattice_shape, spacing, values):
    """Centered second-order divergence of samples on a uniform lattice.

    ``values`` has shape (nx, ny, nz, 3).  Only interior points (one-cell
    margin) are returned; the boundary is excluded because the centered
    stencil does not reach it.
    """
    vals = np.asarray(values, dtype=complex)
    if vals.shape != tuple(lattice_shape) + (3,):
        raise ValueError("lattice values must be (nx, ny, nz, 3)")
    if min(lattice_shape) < 3:
        raise ValueError("lattice too small for a centered stencil")
    h = float(spacing)
    div = (
        (vals[2:, 1:-1, 1:-1, 0] - vals[:-2, 1:-1, 1:-1, 0])
        + (vals[1:-1, 2:, 1:-1, 1] - vals[1:-1, :-2, 1:-1, 1])
        + (vals[1:-1, 1:-1, 2:, 2] - vals[1:-1, 1:-1, :-2, 2])
    ) / (2.0 * h)
    return div


# ---------------------------------------------------------------------------
# Finite differences on evaluation closures
# ---------------------------------------------------------------------------

_D2_COEFF = np.array([-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0])
_D1_COEFF = np.array([1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0])
_OFFSETS = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])


def laplacian_fd(closure, points, h):
    """Fourth-order finite-difference Laplacian of a vector closure."""
    pts = np.asarray(points, dtype=float)
    out = np.zeros(pts.shape, dtype=complex)
    for d in range(3):
        for off, c in zip(_OFFSETS, _D2_COEFF):
            if c == 0.0:
                continue
            shifted = pts.copy()
            shifted[:, d] += off * h
            out += c * np.asarray(closure(shifted), dtype=complex)
    return out / h**2


def gradient_fd(closure, points, h):
    """Fourth-order finite-difference Jacobian: returns (N, 3, k)."""
    pts = np.asarray(points, dtype=float)
    probe = np.asarray(closure(pts), dtype=complex)
    out = np.zeros((pts.shape[0], 3) + probe.shape[1:], dtype=complex)
    for d in range(3):
        acc = np.zeros_like(probe)
        for off, c in zip(_OFFSETS, _D1_COEFF):
            if c == 0.0:
                continue
            shifted = pts.copy()
            shifted[:, d] += off * h
            acc += c * np.asarray(closure(shifted), dtype=complex)
        out[:, d, ...] = acc / h
    return out


# ---------------------------------------------------------------------------
# Newtonian potential gradient and Helmholtz projection
# ---------------------------------------------------------------------------


def _dipole_kernel(diffs):
    """grad of the Newtonian potential solving Delta phi = g: (x-y)/(4 pi |x-y|^3)."""
    d2 = np.sum(diffs * diffs, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = diffs / (4.0 * np.pi * np.maximum(d2, 1e-300) ** 1.5)[..., None]
    return out


_GL_CACHE = {}


def _gl_unit(n):
    """Cached Gauss-Legendre rule on [0, 1]."""
    if n not in _GL_CACHE:
        x, w = leggauss(n)
        _GL_CACHE[n] = (0.5 * (x + 1.0), 0.5 * w)
    return _GL_CACHE[n]


_CORNER_MASKS = np.array(
    [[(c >> d) & 1 for d in range(3)] for c in range(8)], dtype=bool
)


def _duffy_points(x, lo, hi, n):
    """Quadrature for a box split at interior point x into Duffy pyramids.

    The Duffy substitution cancels an |y-x|^-2 kernel singularity at the
    split point exactly, so tensor Gauss-Legendre in the transformed
    variables converges spectrally.  Returns (points, weights).
    """
    t, w = _gl_unit(n)
    T, U, V = np.meshgrid(t, t, t, indexing="ij")
    W = (w[:, None, None] * w[None, :, None] * w[None, None, :]).ravel()
    jac_unit = (T.ravel() ** 2) * W
    pts_all = []
    w_all = []
    for corner in range(8):
        ends = np.where(_CORNER_MASKS[corner], hi, lo)
        extents = ends - x
        vol = abs(float(np.prod(extents)))
        if vol == 0.0:
            continue
        for perm in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
            unit = np.empty((T.size, 3))
            unit[:, perm[0]] = T.ravel()
            unit[:, perm[1]] = (T * U).ravel()
            unit[:, perm[2]] = (T * V).ravel()
            pts_all.append(x[None, :] + unit * extents[None, :])
            w_all.append(jac_unit * vol)
    return np.concatenate(pts_all, axis=0), np.concatenate(w_all)


def _corner_dyadic_points(x, lo, hi, n):
    """Quadrature for a box split at interior point x, kernel-singular at x.

    Each of the (up to) eight corner boxes at ``x`` is decomposed into
    dyadic blocks growing away from ``x``: the innermost isotropic cube gets
    the Duffy treatment, and every other block is separated from ``x`` by at
    least its own scale, so a fixed-order tensor rule is uniformly accurate.
    This keeps the rule accurate even when ``x`` hugs a face of the box,
    where a plain Duffy split would create arbitrarily flat pyramids.
    """
    t, w = _gl_unit(n)
    U1, U2, U3 = np.meshgrid(t, t, t, indexing="ij")
    unit = np.stack([U1.ravel(), U2.ravel(), U3.ravel()], axis=-1)
    wu = (w[:, None, None] * w[None, :, None] * w[None, None, :]).ravel()
    pts_all, w_all = [], []
    block_lo, block_hi = [], []
    for corner in range(8):
        ends = np.where(_CORNER_MASKS[corner], hi, lo)
        e = ends - x
        extent = np.abs(e)
        if np.any(extent < 1e-14):
            continue
        sgn = np.sign(e)
        m = float(np.min(extent))
        segs = []
        for d in range(3):
            s = [(0.0, m)]
            left = m
            while left < extent[d] - 1e-14:
                right = min(2.0 * left, extent[d])
                s.append((left, right))
                left = right
            segs.append(s)
        cube_a = np.minimum(x, x + sgn * m)
        cube_b = np.maximum(x, x + sgn * m)
        p, pw = _duffy_points(x, cube_a, cube_b, n)
        pts_all.append(p)
        w_all.append(pw)
        for i0, s0 in enumerate(segs[0]):
            for i1, s1 in enumerate(segs[1]):
                for i2, s2 in enumerate(segs[2]):
                    if i0 == i1 == i2 == 0:
                        continue
                    lefts = np.array([s0[0], s1[0], s2[0]])
                    rights = np.array([s0[1], s1[1], s2[1]])
                    a = x + sgn * lefts
                    b = x + sgn * rights
                    block_lo.append(np.minimum(a, b))
                    block_hi.append(np.maximum(a, b))
    if block_lo:
        blo = np.array(block_lo)
        ext = np.array(block_hi) - blo
        pts_all.append((blo[:, None, :] + unit[None, :, :] * ext[:, None, :]).reshape(-1, 3))
        w_all.append((wu[None, :] * np.prod(ext, axis=1)[:, None]).ravel())
    return np.concatenate(pts_all, axis=0), np.concatenate(w_all)


def _adaptive_leaves(x, bounds, theta, max_leaves):
    """Octree leaves of a box, refined until separated from x by theta*diam."""
    leaves = []
    stack = [bounds]
    while stack:
        b = stack.pop()
        blo, bhi = b[:, 0], b[:, 1]
        bdiam = float(np.linalg.norm(bhi - blo))
        bgap = float(np.linalg.norm(x - np.clip(x, blo, bhi)))
        if bgap >= theta * bdiam:
            leaves.append(b)
            if len(leaves) > max_leaves:
                raise QuadratureRefinementError(
                    "near-singular cell integral exceeded subdivision budget"
                )
        else:
            mid = 0.5 * (blo + bhi)
            for corner in range(8):
                nlo = np.where(_CORNER_MASKS[corner], mid, blo)
                nhi = np.where(_CORNER_MASKS[corner], bhi, mid)
                stack.append(np.stack([nlo, nhi], axis=1))
    return np.array(leaves)


def singular_quadrature(x, bounds, n=8, theta=1.0, max_leaves=4096):
    """Nodes/weights integrating a kernel singular (or peaked) at x over a box.

    If ``x`` touches the cell, the cell is split at ``x`` into corner boxes
    handled by Duffy transforms (the weights then include the pyramid
    Jacobian, which cancels an |y-x|^-2 singularity).  Otherwise the cell is
    subdivided adaptively until each leaf is separated from ``x`` by at
    least ``theta`` times its diameter, with a tensor Gauss-Legendre rule of
    order ``n`` per leaf.
    """
    x = np.asarray(x, dtype=float)
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    xc = np.clip(x, lo, hi)
    gap = float(np.linalg.norm(x - xc))
    diam = float(np.linalg.norm(hi - lo))
    if gap <= 1e-12 * diam:
        return _corner_dyadic_points(xc, lo, hi, n)

    leaves = _adaptive_leaves(x, bounds, theta, max_leaves)
    t, w = _gl_unit(n)
    U1, U2, U3 = np.meshgrid(t, t, t, indexing="ij")
    unit = np.stack([U1.ravel(), U2.ravel(), U3.ravel()], axis=-1)
    wu = (w[:, None, None] * w[None, :, None] * w[None, None, :]).ravel()
    llo = leaves[:, :, 0]
    ext = leaves[:, :, 1] - llo
    pts = llo[:, None, :] + unit[None, :, :] * ext[:, None, :]
    wq = wu[None, :] * np.prod(ext, axis=1)[:, None]
    return pts.reshape(-1, 3), wq.ravel()


def singular_cell_integral(x, bounds, func, n=8, theta=1.0, max_leaves=4096):
    """Integral over one box cell of an integrand singular (or peaked) at x.

    ``func(points) -> (N, k)`` must include the kernel; see
    :func:`singular_quadrature` for the underlying rule.
    """
    pts, wq = singular_quadrature(x, bounds, n=n, theta=theta, max_leaves=max_leaves)
    vals = np.asarray(func(pts))
    return np.sum(vals * wq[:, None] if vals.ndim > 1 else vals * wq, axis=0)


def newtonian_gradient(div_closure, region, targets, near_factor=0.8,
                       near_order=6):
    """Gradient of the potential solving Delta phi = div f, as samples.

    Far cells use their Gauss-Legendre rule directly; cells closer to a
    target than ``near_factor`` times their width are integrated with the
    singularity-resolving cell rule.  For congruent cells the near rules
    are translation-invariant and cached on the target-cell offset.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    div_vals = np.asarray(div_closure(region.nodes), dtype=complex)
    out = np.zeros((targets.shape[0], 3), dtype=complex)

    width = np.mean(region.cell_bounds[:, :, 1] - region.cell_bounds[:, :, 0], axis=1)
    lo = region.cell_bounds[:, :, 0][None, :, :]
    hi = region.cell_bounds[:, :, 1][None, :, :]
    t = targets[:, None, :]
    gap = np.linalg.norm(np.maximum(lo - t, 0.0) + np.maximum(t - hi, 0.0), axis=2)
    near = gap < near_factor * width[None, :]

    # far-cell contribution, chunked over targets
    chunk = max(1, int(5e5 // max(region.nodes.shape[0], 1)))
    for start in range(0, targets.shape[0], chunk):
        sl = slice(start, min(start + chunk, targets.shape[0]))
        diffs = targets[sl, None, :] - region.nodes[None, :, :]
        kern = _dipole_kernel(diffs)
        contrib = kern * (region.weights * div_vals)[None, :, None]
        # zero out the near cells for these targets
        for ci, cs in enumerate(region.cell_slices):
            rows = np.where(near[sl, ci])[0]
            if rows.size:
                contrib[rows, cs, :] = 0.0
        out[sl] = contrib.sum(axis=1)

    # near-cell contribution: one batched kernel evaluation per target
    extents = region.cell_bounds[:, :, 1] - region.cell_bounds[:, :, 0]
    congruent = float(np.ptp(extents, axis=0).max()) < 1e-12
    cache = {}
    for ti in np.nonzero(near.any(axis=1))[0]:
        x = targets[ti]
        pts_list, w_list = [], []
        for ci in np.nonzero(near[ti])[0]:
            lo_ci = region.cell_bounds[ci, :, 0]
            key = tuple(np.round(x - lo_ci, 9)) if congruent else None
            hit = cache.get(key) if congruent else None
            if hit is None:
                p, w = singular_quadrature(x, region.cell_bounds[ci], n=near_order)
                if congruent:
                    cache[key] = (p - lo_ci, w)
            else:
                p, w = hit[0] + lo_ci, hit[1]
            pts_list.append(p)
            w_list.append(w)
        pts = np.concatenate(pts_list, axis=0)
        wq = np.concatenate(w_list)
        kern = _dipole_kernel(x[None, :] - pts)
        out[ti] += np.sum(kern * (wq * div_closure(pts))[:, None], axis=0)
    return out


def helmholtz_project(fld, region, near_factor=0.75, near_order=8):
    """Leray-Helmholtz projection of a smooth compactly supported field.

    Returns the projected samples on the region grid together with the
    gradient-part closure (the full gradient of the scalar potential, valid
    at any evaluation point, also far outside the source box).

    The projected field is divergence-free by construction: its divergence
    closure is identically zero because the potential solves the Poisson
    equation with the source divergence as data.
    """
    if not isinstance(fld, SmoothField) or fld.div is None:
        raise ValueError("projection needs a SmoothField with analytic divergence")

    def grad_q(targets):
        return newtonian_gradient(
            fld.div, region, targets, near_factor=near_factor,
            near_order=near_order,
        )

    values = fld(region.nodes) - grad_q(region.nodes)
    sample = VectorFieldSample(
        points=region.nodes,
        weights=region.weights,
        values=values,
        tag="source-box",
    )

    def projected_value(points):
        return fld(points) - grad_q(np.atleast_2d(points))

    projected = SmoothField(
        value=projected_value,
        div=lambda pts: np.zeros(np.atleast_2d(pts).shape[0], dtype=complex),
        support=None,
    )
    return sample, grad_q, projected
