"""Far-source to local-field operator: assembly, SVD, truncated recovery.

The compact operator maps compactly supported sources in the far box to
velocity fields on the unit ball through the resolvent convolution.  Both
ends are discretized as weighted sample spaces; square roots of the
quadrature weights are folded into the matrix so that the conjugate
transpose of the matrix *is* the L2 adjoint of the operator.  Source-side
inner products go through the dictionary Gram matrix, whose Cholesky factor
orthonormalizes the singular triples.
"""

import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import kernel
from .fields import (
    SmoothField,
    TensorBump,
    VectorFieldSample,
    bump_curl_field,
    bump_direction_field,
)
from .kernel import adjoint_apply

__all__ = [
    "AssembledOperator",
    "SourceBasis",
    "SpectrumShape",
    "StabilityFit",
    "SvdModel",
    "TruncationPolicy",
    "adjoint_apply",
    "approximation_error",
    "assemble_operator",
    "construct_F",
    "make_source_basis",
    "probe_solution_norms",
    "spectrum_shape",
    "stability_probe",
    "svd",
    "truncation_alpha",
]

DEDUP_RELATIVE_GAP = 1e-12


# ---------------------------------------------------------------------------
# source dictionary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceBasis:
    """Smooth compactly supported dictionary over the source box.

    One tensor bump per cell times the three coordinate directions, plus the
    divergence-free curl triple of the same bump.  Every element vanishes
    (with three derivatives) on its cell boundary, so cell Gauss rules see
    pure polynomials and the Gram matrix is exact at the sample level.
    """

    elements: tuple
    labels: tuple
    gram: np.ndarray
    region: object

    def __post_init__(self):
        try:
            np.linalg.cholesky(self.gram)
        except np.linalg.LinAlgError as exc:
            raise ValueError("dictionary Gram matrix is not positive definite") from exc

    @property
    def size(self):
        return len(self.elements)

    def values_at(self, points):
        """Stacked element values, shape (n_points, 3, size)."""
        out = np.empty((np.atleast_2d(points).shape[0], 3, self.size), dtype=complex)
        for k, el in enumerate(self.elements):
            out[:, :, k] = el(points)
        return out

    def div_at(self, points):
        out = np.empty((np.atleast_2d(points).shape[0], self.size), dtype=complex)
        for k, el in enumerate(self.elements):
            out[:, k] = el.div(points)
        return out

    def combine(self, coeffs):
        """Smooth field for a coefficient vector over the dictionary."""
        coeffs = np.asarray(coeffs, dtype=complex)
        elements = self.elements

        def value(points):
            acc = np.zeros((np.atleast_2d(points).shape[0], 3), dtype=complex)
            for c, el in zip(coeffs, elements):
                if c != 0.0:
                    acc += c * el(points)
            return acc

        def div(points):
            acc = np.zeros(np.atleast_2d(points).shape[0], dtype=complex)
            for c, el in zip(coeffs, elements):
                if c != 0.0:
                    acc += c * el.div(points)
            return acc

        return SmoothField(value=value, div=div)

    def norm(self, coeffs):
        """Dictionary-span L2(Y) norm of a coefficient vector."""
        coeffs = np.asarray(coeffs, dtype=complex)
        return float(np.sqrt(max((np.conj(coeffs) @ self.gram @ coeffs).real, 0.0)))


def make_source_basis(region, include_curl=True):
    """Bump-times-direction dictionary (plus curl triples) on a region grid.

    Elements of different cells have disjoint supports, so the Gram matrix
    is block-diagonal and is assembled cell by cell.
    """
    elements = []
    labels = []
    eye = np.eye(3)
    for ci in range(region.n_cells):
        bump = TensorBump.for_cell(region.cell_bounds[ci])
        for ax in range(3):
            elements.append(bump_direction_field(bump, eye[ax]))
            labels.append(("dir", ci, ax))
        if include_curl:
            for ax in range(3):
                elements.append(bump_curl_field(bump, eye[ax]))
                labels.append(("curl", ci, ax))
    per_cell = 6 if include_curl else 3
    gram = np.zeros((len(elements), len(elements)), dtype=complex)
    for ci, cs in enumerate(region.cell_slices):
        nodes = region.nodes[cs]
        w = region.weights[cs]
        block = slice(ci * per_cell, (ci + 1) * per_cell)
        vals = np.stack([elements[k](nodes) for k in range(*block.indices(len(elements)))], axis=-1)
        gram[block, block] = np.einsum("n,nck,ncl->kl", w, np.conj(vals), vals)
    gram = 0.5 * (gram + gram.conj().T)
    return SourceBasis(
        elements=tuple(elements),
        labels=tuple(labels),
        gram=gram,
        region=region,
    )


# ---------------------------------------------------------------------------
# operator assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssembledOperator:
    """Weight-scaled matrix of the source-to-field map on a dictionary."""

    matrix: np.ndarray  # (3 * n_ball_points, basis.size)
    lam: complex
    basis: SourceBasis
    d_grid: object

    @property
    def sqrt_weights(self):
        return np.sqrt(np.repeat(self.d_grid.weights, 3))


def _cell_column_map(basis):
    """Column indices per region cell, or None for a non-cellular basis."""
    labels = getattr(basis, "labels", None)
    if not labels or len(labels) != basis.size:
        return None
    out = defaultdict(list)
    for k, lab in enumerate(labels):
        if not (isinstance(lab, tuple) and len(lab) == 3):
            return None
        out[int(lab[1])].append(k)
    return out


def assemble_operator(lam, basis, d_grid):
    """Columns = velocity fields of the dictionary elements on the ball grid.

    Rows carry sqrt(quadrature weight) so matrix inner products realize
    L2(D) inner products; source-side norms go through ``basis.gram``.
    Cell-local dictionaries are assembled cell by cell, touching only the
    columns each cell supports.
    """
    lam = complex(lam)
    region = basis.region
    cond = np.linalg.cond(basis.gram)
    if cond > 1e12:
        warnings.warn(
            f"dictionary Gram condition number {cond:.3e} exceeds 1e12; "
            "singular triples may lose accuracy",
            stacklevel=2,
        )
    pts = d_grid.points
    n_t = pts.shape[0]
    cols = np.zeros((n_t, 3, basis.size), dtype=complex)
    cell_map = _cell_column_map(basis)
    if cell_map is not None and hasattr(region, "cell_slices"):
        for ci, cs in enumerate(region.cell_slices):
            kk = cell_map.get(ci, [])
            if not kk:
                continue
            nodes = region.nodes[cs]
            w = region.weights[cs]
            vals = np.stack([basis.elements[k](nodes) for k in kk], axis=-1)
            divs = np.stack([basis.elements[k].div(nodes) for k in kk], axis=-1)
            E, psi_dir = kernel.kernel_blocks(lam, pts, nodes)
            cols[:, :, kk] = np.einsum("tn,n,nck->tck", E, w, vals)
            cols[:, :, kk] += (
                np.einsum("tnc,nk->tck", psi_dir, w[:, None] * divs) / lam
            )
    else:
        f_vals = basis.values_at(region.nodes)
        div_vals = basis.div_at(region.nodes)
        w_src = region.weights
        chunk = max(1, int(4e5 // max(w_src.size, 1)))
        for start in range(0, n_t, chunk):
            sl = slice(start, min(start + chunk, n_t))
            E, psi_dir = kernel.kernel_blocks(lam, pts[sl], region.nodes)
            cols[sl] = np.einsum("tn,n,nck->tck", E, w_src, f_vals)
            cols[sl] += (
                np.einsum("tnc,nk->tck", psi_dir, w_src[:, None] * div_vals) / lam
            )
    sqrt_w = np.sqrt(d_grid.weights)[:, None, None]
    matrix = (cols * sqrt_w).reshape(3 * n_t, basis.size)
    return AssembledOperator(matrix=matrix, lam=lam, basis=basis, d_grid=d_grid)


# ---------------------------------------------------------------------------
# singular value decomposition on the weighted spaces
# ---------------------------------------------------------------------------


@dataclass
class SvdModel:
    """Singular triples of the discretized source-to-field operator.

    ``singular_values`` is non-increasing; ``distinct_alphas`` collapses
    numerically equal neighbours (relative gap below 1e-12, earlier index
    kept) and is strictly decreasing.  ``source_modes[:, j]`` holds the
    coefficients of f_j over the dictionary, orthonormal in L2(Y);
    ``solution_values[:, :, j]`` samples v_j on the ball grid, orthonormal
    in L2(D).
    """

    singular_values: np.ndarray
    source_modes: np.ndarray  # (K, J)
    solution_values: np.ndarray  # (n_points, 3, J)
    basis: SourceBasis
    d_grid: object
    lam: complex

    @property
    def distinct_alphas(self):
        alphas = [self.singular_values[0]]
        for a in self.singular_values[1:]:
            if (alphas[-1] - a) > DEDUP_RELATIVE_GAP * alphas[-1]:
                alphas.append(a)
        return np.array(alphas)

    def solution_mode(self, j):
        return VectorFieldSample(
            self.d_grid.points,
            self.d_grid.weights,
            self.solution_values[:, :, j],
            tag="ball",
        )

    def project(self, v):
        """Coefficients beta_j = <v, v_j>_{L2(D)} for ball samples v."""
        w = self.d_grid.weights
        return np.einsum(
            "n,ncj,nc->j", w, np.conj(self.solution_values), v.values
        )


@dataclass(frozen=True)
class _UnitGrid:
    """Euclidean stand-in grid for decomposing a plain matrix."""

    points: np.ndarray
    weights: np.ndarray


def svd(operator):
    """Singular triples in the weighted L2 geometry.

    Accepts an :class:`AssembledOperator` (dictionary Gram folded in through
    its Cholesky factor) or a plain matrix, which is decomposed in plain
    Euclidean coordinates (rows as scalar samples with unit weights).
    """
    if isinstance(operator, np.ndarray):
        u, s, vh = np.linalg.svd(operator, full_matrices=False)
        rows = operator.shape[0]
        return SvdModel(
            singular_values=s,
            source_modes=vh.conj().T,
            solution_values=u.reshape(rows, 1, -1),
            basis=None,
            d_grid=_UnitGrid(points=np.zeros((rows, 3)), weights=np.ones(rows)),
            lam=0.0,
        )
    mat = operator.matrix
    basis = operator.basis
    chol = np.linalg.cholesky(basis.gram)  # gram = chol @ chol^H
    # orthonormal source coordinates y = chol^H c
    m_ortho = np.linalg.solve(chol, mat.conj().T).conj().T  # mat @ chol^{-H}
    u, s, vh = np.linalg.svd(m_ortho, full_matrices=False)
    source_modes = np.linalg.solve(chol.conj().T, vh.conj().T)
    n_t = operator.d_grid.points.shape[0]
    inv_sqrt_w = 1.0 / np.sqrt(operator.d_grid.weights)
    sol = (u.reshape(n_t, 3, -1)) * inv_sqrt_w[:, None, None]
    return SvdModel(
        singular_values=s,
        source_modes=source_modes,
        solution_values=sol,
        basis=basis,
        d_grid=operator.d_grid,
        lam=operator.lam,
    )


@dataclass(frozen=True)
class SpectrumShape:
    """Decay-shape summary of a computed singular-value sequence."""

    resolved: np.ndarray
    strictly_decreasing: bool
    loglog_curvature: float


def spectrum_shape(singular_values, rel_floor=1e-13):
    """Resolved part of a singular-value sequence and its decay shape.

    Values below ``rel_floor`` times the leading singular value sit at the
    noise floor of the factorization (exact ties appear there) and are
    dropped.  ``loglog_curvature`` is the quadratic coefficient of a
    least-squares fit of log alpha_j against log j over the resolved part;
    a negative value means the local algebraic decay order keeps
    increasing along the sequence, i.e. decay faster than any fixed power.
    """
    s = np.asarray(singular_values, dtype=float)
    if s.size == 0 or s[0] <= 0.0:
        raise ValueError("need a nonempty positive singular-value sequence")
    resolved = s[s > rel_floor * s[0]]
    strict = bool(np.all(np.diff(resolved) < 0.0))
    if resolved.size >= 3:
        x = np.log(np.arange(1, resolved.size + 1, dtype=float))
        y = np.log(resolved)
        coef, *_ = np.linalg.lstsq(np.stack([np.ones_like(x), x, x * x], axis=1), y, rcond=None)
        curvature = float(coef[2])
    else:
        curvature = 0.0
    return SpectrumShape(
        resolved=resolved,
        strictly_decreasing=strict,
        loglog_curvature=curvature,
    )


# ---------------------------------------------------------------------------
# truncation policy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TruncationPolicy:
    """Spectral cutoff exp(-C_stab^{4/mu} (<lam>/eps)^{4/mu}).

    ``<lam>`` is the bracket sqrt(1 + |lam|^2).  The cutoff is floored at
    the smallest positive normal float; ``saturated`` records that the
    unfloored value underflowed.
    """

    C_stab: float
    mu: float
    epsilon: float
    lam: complex
    alpha: float = field(init=False)
    saturated: bool = field(init=False)

    def __post_init__(self):
        if self.C_stab <= 0.0 or self.mu <= 0.0 or self.epsilon <= 0.0:
            raise ValueError("C_stab, mu, epsilon must all be positive")
        bracket = np.sqrt(1.0 + abs(complex(self.lam)) ** 2)
        expo = self.C_stab ** (4.0 / self.mu) * (bracket / self.epsilon) ** (4.0 / self.mu)
        tiny = float(np.finfo(float).tiny)
        raw = np.exp(-min(expo, 800.0)) if expo < 800.0 else 0.0
        saturated = raw < tiny
        object.__setattr__(self, "alpha", max(float(raw), tiny))
        object.__setattr__(self, "saturated", bool(saturated))


def truncation_alpha(C_stab, mu, epsilon, lam):
    """Cutoff value of the policy; see :class:`TruncationPolicy` for the flag."""
    return TruncationPolicy(C_stab=C_stab, mu=mu, epsilon=epsilon, lam=lam).alpha


# ---------------------------------------------------------------------------
# truncated source recovery
# ---------------------------------------------------------------------------


def construct_F(v, model, alpha):
    """Truncated pseudo-inverse source for ball samples v.

    Returns the dictionary coefficients of F = sum_{alpha_j > alpha}
    (beta_j / alpha_j) f_j together with the retained index set.  The
    source norm obeys ||F||_{L2(Y)} <= ||v||_{L2(D)} / alpha by Bessel.
    """
    beta = model.project(v)
    retained = np.nonzero(model.singular_values > alpha)[0]
    if retained.size == 0:
        warnings.warn(
            "truncation level is at or above the top singular value; "
            "recovered source is empty",
            stacklevel=2,
        )
        return np.zeros(model.source_modes.shape[0], dtype=complex), retained
    coeffs = model.source_modes[:, retained] @ (
        beta[retained] / model.singular_values[retained]
    )
    return coeffs, retained


def approximation_error(v, model, alpha):
    """Unrecovered remainder E = v - A F and its L2(D) norm.

    The remainder equals the discarded-mode sum, so it is orthogonal to
    A F; the computed pairing <E, A F> is attached to the returned sample
    as ``cross_inner`` for checking.
    """
    beta = model.project(v)
    retained = model.singular_values > alpha
    af_values = np.einsum(
        "ncj,j->nc", model.solution_values[:, :, retained], beta[retained]
    )
    err_values = v.values - af_values
    err_field = VectorFieldSample(
        v.points, v.weights, err_values, tag=v.tag, measure=v.measure
    )
    w = model.d_grid.weights
    err_norm = float(
        np.sqrt(max(np.sum(w * np.sum(np.abs(err_values) ** 2, axis=-1)).real, 0.0))
    )
    cross = complex(np.sum(w[:, None] * err_values * np.conj(af_values)))
    err_field.cross_inner = cross
    return err_field, err_norm


# ---------------------------------------------------------------------------
# three-ball stability probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StabilityFit:
    """Fitted three-ball interpolation exponent; diagnostic only."""

    C: float
    theta: float
    degenerate: bool = False


def probe_solution_norms(lam, basis, radii, n_probes=12, rng=None, n_r=6, n_theta=8):
    """L2 ball norms of random dictionary-source solutions on nested balls."""
    from .fields import ball_grid, sphere_grid

    rng = np.random.default_rng(rng)
    sph = sphere_grid(n_theta)
    grids = [ball_grid(r, n_r, sph) for r in radii]
    norms = np.zeros((n_probes, len(radii)))
    for p in range(n_probes):
        coeffs = rng.standard_normal(basis.size) + 1j * rng.standard_normal(basis.size)
        fld = basis.combine(coeffs)
        rf = kernel.resolvent_convolve(lam, fld, basis.region)
        for gi, g in enumerate(grids):
            vals = rf.velocity(g.points)
            norms[p, gi] = np.sqrt(
                np.sum(g.weights * np.sum(np.abs(vals) ** 2, axis=-1))
            )
    return norms


def stability_probe(norms_r1, norms_r2, norms_r3):
    """Least-squares fit of ||v||_{R2} ~ C ||v||_{R1}^theta ||v||_{R3}^(1-theta).

    Operates on matched arrays of ball norms from a probe family; returns a
    degenerate-fit sentinel when the probes do not separate the exponent
    (all norm ratios identical).
    """
    n1 = np.log(np.asarray(norms_r1, dtype=float))
    n2 = np.log(np.asarray(norms_r2, dtype=float))
    n3 = np.log(np.asarray(norms_r3, dtype=float))
    x = n1 - n3
    y = n2 - n3
    if np.ptp(x) < 1e-12:
        return StabilityFit(C=np.nan, theta=np.nan, degenerate=True)
    A = np.stack([np.ones_like(x), x], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return StabilityFit(C=float(np.exp(coef[0])), theta=float(coef[1]))
