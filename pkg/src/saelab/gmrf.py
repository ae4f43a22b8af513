"""Sparse GMRF machinery: scaled ICAR, SPDE-Matern assembly, factorization, sampling.

Conventions
-----------
* A precision matrix may be improper (ICAR); linear constraints restore
  propriety on the constraint-complement subspace.
* Factorizations go through SuperLU.  Determinants restricted to the
  constraint subspace use the bordered (KKT) matrix ``[[Q, C'], [C, 0]]``:
  ``logdet_V(Q) = logabsdet(KKT) - logdet(C C')``, which is also how
  constrained solves and conditioning-by-kriging draws are produced.
* Sampling from N(0, Q^-1) uses a sparse square root B with B B' = Q:
  draw z ~ N(0, I), solve Q x = B z.  Both the ICAR structure matrix
  (via the graph incidence matrix) and the SPDE precision (via its
  K C^-1 K form) have explicit sparse roots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .geodata import AdjacencyGraph


class FactorizationError(RuntimeError):
    pass


class SparseFactor:
    """LU factorization of a sparse matrix with solve and log|det|."""

    def __init__(self, matrix):
        mat = sparse.csc_matrix(matrix)
        try:
            self._lu = splu(mat, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise FactorizationError(str(exc)) from None
        self.shape = mat.shape

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        out = self._lu.solve(np.asarray(rhs, dtype=float))
        if not np.all(np.isfinite(out)):
            raise FactorizationError("solve produced non-finite values")
        return out

    def logabsdet(self) -> float:
        diag = self._lu.U.diagonal()
        if np.any(diag == 0):
            raise FactorizationError("singular factor")
        return float(np.sum(np.log(np.abs(diag))))


def kkt_matrix(q, constraint: np.ndarray | None):
    """Bordered matrix [[Q, C'], [C, 0]]; plain Q when unconstrained."""
    if constraint is None or constraint.size == 0:
        return sparse.csc_matrix(q)
    c = sparse.csc_matrix(np.atleast_2d(constraint))
    k = c.shape[0]
    return sparse.bmat([[q, c.T], [c, sparse.csc_matrix((k, k))]], format="csc")


def logdet_constrained(q, constraint: np.ndarray | None) -> float:
    """log-determinant of Q restricted to the null space of the constraints."""
    factor = SparseFactor(kkt_matrix(q, constraint))
    out = factor.logabsdet()
    if constraint is not None and constraint.size:
        c = np.atleast_2d(constraint)
        out -= float(np.linalg.slogdet(c @ c.T)[1])
    return out


@dataclass
class SparsePrecision:
    """Symmetric sparse precision with optional sqrt and linear constraints.

    ``sqrt`` satisfies sqrt @ sqrt.T == matrix and enables O(solve)
    sampling; when absent a dense symmetric square root is computed on
    demand (small test instances only).
    """

    matrix: sparse.spmatrix
    sqrt: sparse.spmatrix | None = None
    constraint: np.ndarray | None = None
    constraint_rhs: np.ndarray | None = None

    def __post_init__(self):
        self.matrix = sparse.csc_matrix(self.matrix)
        n = self.matrix.shape[0]
        if self.matrix.shape != (n, n):
            raise ValueError("precision must be square")
        asym = abs(self.matrix - self.matrix.T).max()
        if asym > 1e-10 * max(1.0, abs(self.matrix).max()):
            raise ValueError("precision must be symmetric")
        if self.constraint is not None:
            self.constraint = np.atleast_2d(np.asarray(self.constraint, dtype=float))
            if self.constraint.shape[1] != n:
                raise ValueError("constraint width must match precision order")
            if self.constraint_rhs is None:
                self.constraint_rhs = np.zeros(self.constraint.shape[0])

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def dense_sqrt(self) -> np.ndarray:
        w, v = np.linalg.eigh(self.matrix.toarray())
        w = np.clip(w, 0.0, None)
        return v * np.sqrt(w)


def sample_gmrf(precision: SparsePrecision, n_draws: int, seed) -> np.ndarray:
    """Zero-mean Gaussian draws with the given precision.

    Constraints are enforced by conditioning-by-kriging, implemented as a
    single solve against the bordered KKT system per draw batch.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    rng = np.random.default_rng(seed)
    n = precision.n
    b = precision.sqrt if precision.sqrt is not None else precision.dense_sqrt()
    k = b.shape[1]
    z = rng.standard_normal((k, n_draws))
    bz = np.asarray(b @ z)

    c = precision.constraint
    factor = SparseFactor(kkt_matrix(precision.matrix, c))
    if c is None:
        return factor.solve(bz).T
    ncon = c.shape[0]
    rhs = np.vstack([bz, np.tile(precision.constraint_rhs[:, None], (1, n_draws))])
    sol = factor.solve(rhs)
    return sol[:n].T


# ---------------------------------------------------------------------------
# Scaled ICAR


@dataclass(frozen=True)
class ScaledIcar:
    """ICAR structure matrix with the marginal-variance scaling.

    ``structure`` is the raw graph Laplacian (degree on the diagonal, -1
    for neighbors).  ``scale`` multiplies it so that the geometric mean
    of the marginal variances of the constrained field equals 1.
    ``gamma`` holds the eigenvalues of the scaled generalized inverse
    (one of them 0), which drive the mixing-parameter PC prior.
    """

    m: int
    structure: sparse.spmatrix
    scale: float
    gamma: np.ndarray
    incidence: sparse.spmatrix

    def scaled_structure(self) -> sparse.csc_matrix:
        return sparse.csc_matrix(self.structure * self.scale)

    def sparse_precision(self) -> SparsePrecision:
        """Scaled ICAR as a constrained (sum-to-zero) precision with sqrt."""
        sqrt = (self.incidence.T * np.sqrt(self.scale)).tocsc()
        return SparsePrecision(self.scaled_structure(), sqrt=sqrt,
                               constraint=np.ones((1, self.m)))


def icar_scaled(graph: AdjacencyGraph) -> ScaledIcar:
    """Build the sum-to-zero-scaled ICAR structure for a connected graph."""
    m = graph.m
    if m < 2:
        raise ValueError("ICAR needs at least 2 areas")
    if not graph.connected:
        raise ValueError("ICAR requires a connected adjacency graph")
    rows, cols, vals = [], [], []
    deg = graph.neighbor_counts()
    inc_r, inc_c, inc_v = [], [], []
    for e, (i, j) in enumerate(graph.edges):
        rows += [i, j]
        cols += [j, i]
        vals += [-1.0, -1.0]
        inc_r += [e, e]
        inc_c += [i, j]
        inc_v += [1.0, -1.0]
    rows += list(range(m))
    cols += list(range(m))
    vals += deg.astype(float).tolist()
    structure = sparse.csc_matrix((vals, (rows, cols)), shape=(m, m))
    incidence = sparse.csc_matrix((inc_v, (inc_r, inc_c)), shape=(len(graph.edges), m))

    # marginal variances of the constrained field = diagonal of the
    # pseudoinverse; scale so their geometric mean is 1
    pinv = np.linalg.pinv(structure.toarray(), hermitian=True)
    mvar = np.diag(pinv)
    scale = float(np.exp(np.mean(np.log(mvar))))
    gamma = np.linalg.eigvalsh(pinv) / scale
    gamma = np.clip(gamma, 0.0, None)

    check = np.exp(np.mean(np.log(mvar / scale)))
    assert abs(check - 1.0) < 1e-6
    return ScaledIcar(m, structure, scale, gamma, incidence)


# ---------------------------------------------------------------------------
# SPDE-Matern on a triangulated lattice


@dataclass(frozen=True)
class SpdeOperator:
    """P1 finite-element operators for the Matern SPDE on a triangulation.

    ``c_diag`` is the lumped mass matrix diagonal and ``g`` the stiffness
    matrix.  ``nodes`` are (n, 2) coordinates; ``interior`` flags nodes of
    the original (unbuffered) domain.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    c_diag: np.ndarray
    g: sparse.spmatrix
    interior: np.ndarray
    _locator: dict | None = None

    def __post_init__(self):
        if np.any(self.c_diag <= 0):
            raise ValueError("lumped mass matrix must be positive")

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def projector(self, x: np.ndarray, y: np.ndarray) -> sparse.csr_matrix:
        """Barycentric interpolation rows from mesh nodes to points.

        Each row has at most 3 nonzeros summing to 1.  Points outside the
        mesh hull raise.
        """
        if self._locator is None:
            raise ValueError("mesh has no point locator (synthetic test operator)")
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        loc = self._locator
        h, x0, y0, nx, ny = loc["h"], loc["x0"], loc["y0"], loc["nx"], loc["ny"]
        fx = (x - x0) / h
        fy = (y - y0) / h
        eps = 1e-9
        if np.any(fx < -eps) or np.any(fx > nx - 1 + eps) or \
           np.any(fy < -eps) or np.any(fy > ny - 1 + eps):
            raise ValueError("point outside mesh hull")
        ix = np.clip(np.floor(fx).astype(int), 0, nx - 2)
        iy = np.clip(np.floor(fy).astype(int), 0, ny - 2)
        ax = np.clip(fx - ix, 0.0, 1.0)
        ay = np.clip(fy - iy, 0.0, 1.0)

        base = iy * nx + ix
        lower = ax + ay <= 1.0
        rows = np.repeat(np.arange(x.size), 3)
        cols = np.empty((x.size, 3), dtype=int)
        wts = np.empty((x.size, 3))
        # lower triangle: (ix,iy), (ix+1,iy), (ix,iy+1)
        cols[lower, 0] = base[lower]
        cols[lower, 1] = base[lower] + 1
        cols[lower, 2] = base[lower] + nx
        wts[lower, 0] = 1.0 - ax[lower] - ay[lower]
        wts[lower, 1] = ax[lower]
        wts[lower, 2] = ay[lower]
        up = ~lower
        # upper triangle: (ix+1,iy), (ix+1,iy+1), (ix,iy+1)
        cols[up, 0] = base[up] + 1
        cols[up, 1] = base[up] + nx + 1
        cols[up, 2] = base[up] + nx
        wts[up, 0] = 1.0 - ay[up]
        wts[up, 1] = ax[up] + ay[up] - 1.0
        wts[up, 2] = 1.0 - ax[up]
        a = sparse.csr_matrix((wts.ravel(), (rows, cols.ravel())),
                              shape=(x.size, self.n_nodes))
        a.sum_duplicates()
        return a


def build_regular_mesh(bbox: tuple[float, float, float, float], spacing: float,
                       buffer: float = 0.0) -> SpdeOperator:
    """Regular right-triangle mesh over a bounding box extended by a buffer.

    The buffer mitigates SPDE boundary inflation; one correlation range is
    the usual choice.
    """
    x_min, x_max, y_min, y_max = bbox
    if spacing <= 0 or x_max <= x_min or y_max <= y_min:
        raise ValueError("invalid mesh extent or spacing")
    x0 = x_min - buffer
    y0 = y_min - buffer
    nx = int(np.ceil((x_max + buffer - x0) / spacing)) + 1
    ny = int(np.ceil((y_max + buffer - y0) / spacing)) + 1
    xs = x0 + spacing * np.arange(nx)
    ys = y0 + spacing * np.arange(ny)
    xx, yy = np.meshgrid(xs, ys)
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    # two triangles per lattice cell, consistent with projector()
    iy, ix = np.meshgrid(np.arange(ny - 1), np.arange(nx - 1), indexing="ij")
    base = (iy * nx + ix).ravel()
    t_lower = np.column_stack([base, base + 1, base + nx])
    t_upper = np.column_stack([base + 1, base + nx + 1, base + nx])
    triangles = np.vstack([t_lower, t_upper])

    p = nodes[triangles]  # (ntri, 3, 2)
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    c_diag = np.zeros(nodes.shape[0])
    np.add.at(c_diag, triangles.ravel(), np.repeat(area / 3.0, 3))

    # P1 stiffness: grad(phi_i) . grad(phi_j) * area, from edge vectors
    edges = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    rows, cols, vals = [], [], []
    for i in range(3):
        for j in range(3):
            rows.append(triangles[:, i])
            cols.append(triangles[:, j])
            vals.append(np.einsum("td,td->t", edges[:, i], edges[:, j]) / (4.0 * area))
    g = sparse.csc_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(nodes.shape[0],) * 2)
    g.sum_duplicates()

    interior = ((nodes[:, 0] >= x_min - 1e-9) & (nodes[:, 0] <= x_max + 1e-9) &
                (nodes[:, 1] >= y_min - 1e-9) & (nodes[:, 1] <= y_max + 1e-9))
    locator = {"h": spacing, "x0": x0, "y0": y0, "nx": nx, "ny": ny}
    return SpdeOperator(nodes, triangles, c_diag, g, interior, locator)


def matern_params(spatial_range: float, sigma: float) -> tuple[float, float]:
    """Map (range at correlation ~0.1, marginal SD) to SPDE (kappa, tau).

    Smoothness is fixed at nu = 1 in d = 2, so kappa = sqrt(8)/range and
    tau = 1 / (4 pi kappa^2 sigma^2).
    """
    if spatial_range <= 0 or sigma <= 0:
        raise ValueError("range and sigma must be positive")
    kappa = np.sqrt(8.0) / spatial_range
    tau = 1.0 / (4.0 * np.pi * kappa**2 * sigma**2)
    return float(kappa), float(tau)


def spde_precision(op: SpdeOperator, kappa: float, tau: float) -> SparsePrecision:
    """Q = tau (kappa^4 C + 2 kappa^2 G + G C^-1 G) with its sparse root.

    With K = kappa^2 C + G the root is sqrt(tau) K C^-1/2, since
    tau K C^-1 K expands to exactly Q.
    """
    if kappa <= 0 or tau <= 0:
        raise ValueError("kappa and tau must be positive")
    c = sparse.diags(op.c_diag)
    c_inv_sqrt = sparse.diags(1.0 / np.sqrt(op.c_diag))
    base = (((kappa**2) * c + op.g) @ c_inv_sqrt).tocsc()
    q1 = (base @ base.T).tocsc()
    q1 = ((q1 + q1.T) * 0.5).tocsc()  # exact: (a+a)/2 == a, commutative otherwise
    sqrt = (np.sqrt(tau) * base).tocsc()
    return SparsePrecision(q1 * tau, sqrt=sqrt)
