"""Matrix-free forward operators.

Every operator exposes the four queries the variational updates need:
``apply`` (H f), ``adjoint`` (H^T g), ``weighted_gram_diagonal``
(diag(H^T W H) for a diagonal weight W) and ``row_weighted_square_sum``
(diag(H V H^T) for a diagonal V). Inputs are flat float arrays; operators
are immutable after construction.
"""

import csv
from abc import ABC, abstractmethod
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import ndimage


class DimensionError(ValueError):
    pass


def _as_vector(x, expected, what):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        x = x.ravel()
    if x.size != expected:
        raise DimensionError(f"{what}: expected length {expected}, got {x.size}")
    return x


def _nonnegative(x, what):
    if np.any(x < 0):
        raise ValueError(f"{what} must be nonnegative")


class LinearOperator(ABC):
    """Forward map H from a grid of ``domain_size`` voxels to ``range_size`` data."""

    kind = "abstract"

    def __init__(self, domain_size, range_size):
        self.domain_size = int(domain_size)
        self.range_size = int(range_size)

    @property
    def shape(self):
        return (self.range_size, self.domain_size)

    def apply(self, f):
        f = _as_vector(f, self.domain_size, "apply")
        return self._apply(f)

    def adjoint(self, g):
        g = _as_vector(g, self.range_size, "adjoint")
        return self._adjoint(g)

    def weighted_gram_diagonal(self, w):
        """Return d with d_j = sum_i w_i H_ij^2."""
        w = _as_vector(w, self.range_size, "weighted_gram_diagonal")
        _nonnegative(w, "weights")
        return self._weighted_gram_diagonal(w)

    def row_weighted_square_sum(self, v):
        """Return r with r_i = sum_j H_ij^2 v_j."""
        v = _as_vector(v, self.domain_size, "row_weighted_square_sum")
        _nonnegative(v, "variances")
        return self._row_weighted_square_sum(v)

    def to_dense(self):
        """Densify column by column. Only meant for small test instances."""
        out = np.empty(self.shape)
        e = np.zeros(self.domain_size)
        for j in range(self.domain_size):
            e[j] = 1.0
            out[:, j] = self._apply(e)
            e[j] = 0.0
        return out

    def frobenius_norm(self):
        return float(np.sqrt(self._weighted_gram_diagonal(np.ones(self.range_size)).sum()))

    @abstractmethod
    def _apply(self, f): ...

    @abstractmethod
    def _adjoint(self, g): ...

    @abstractmethod
    def _weighted_gram_diagonal(self, w): ...

    @abstractmethod
    def _row_weighted_square_sum(self, v): ...


class DenseOperator(LinearOperator):
    kind = "dense"

    def __init__(self, matrix):
        matrix = np.array(matrix, dtype=float, copy=True)
        if matrix.ndim != 2:
            raise ValueError("dense operator needs a 2-D coefficient table")
        super().__init__(matrix.shape[1], matrix.shape[0])
        matrix.setflags(write=False)
        self.matrix = matrix
        self._squared = matrix**2

    def _apply(self, f):
        return self.matrix @ f

    def _adjoint(self, g):
        return self.matrix.T @ g

    def _weighted_gram_diagonal(self, w):
        return self._squared.T @ w

    def _row_weighted_square_sum(self, v):
        return self._squared @ v

    def to_dense(self):
        return np.array(self.matrix)


class DiagonalOperator(LinearOperator):
    """H = diag(h). Identity when ``h`` is all ones, zero operator when all zeros."""

    kind = "diagonal"

    def __init__(self, diagonal):
        diagonal = np.array(diagonal, dtype=float, copy=True).ravel()
        super().__init__(diagonal.size, diagonal.size)
        diagonal.setflags(write=False)
        self.diagonal = diagonal

    def _apply(self, f):
        return self.diagonal * f

    def _adjoint(self, g):
        return self.diagonal * g

    def _weighted_gram_diagonal(self, w):
        return self.diagonal**2 * w

    def _row_weighted_square_sum(self, v):
        return self.diagonal**2 * v


def identity(n):
    return DiagonalOperator(np.ones(n))


class ConvolutionOperator(LinearOperator):
    """Same-size convolution with zero padding outside the grid.

    ``grid_shape`` may be 2-D or 3-D; the kernel must have the same number of
    axes and odd extent along each of them.
    """

    kind = "convolution"

    def __init__(self, kernel, grid_shape):
        kernel = np.array(kernel, dtype=float, copy=True)
        grid_shape = tuple(int(s) for s in grid_shape)
        if kernel.ndim != len(grid_shape):
            raise ValueError("kernel and grid must have the same number of axes")
        if any(s % 2 == 0 for s in kernel.shape):
            raise ValueError("kernel extent must be odd along every axis")
        n = int(np.prod(grid_shape))
        super().__init__(n, n)
        kernel.setflags(write=False)
        self.kernel = kernel
        self.grid_shape = grid_shape
        self._squared = kernel**2

    def _conv(self, x, kernel):
        out = ndimage.convolve(x.reshape(self.grid_shape), kernel, mode="constant", cval=0.0)
        return out.ravel()

    def _corr(self, x, kernel):
        out = ndimage.correlate(x.reshape(self.grid_shape), kernel, mode="constant", cval=0.0)
        return out.ravel()

    def _apply(self, f):
        return self._conv(f, self.kernel)

    def _adjoint(self, g):
        return self._corr(g, self.kernel)

    def _weighted_gram_diagonal(self, w):
        return self._corr(w, self._squared)

    def _row_weighted_square_sum(self, v):
        return self._conv(v, self._squared)


def box_kernel(size, ndim=2):
    """Normalized box blur of odd ``size`` along each of ``ndim`` axes."""
    k = np.ones((size,) * ndim)
    return k / k.sum()


def gaussian_kernel(size, sigma, ndim=2):
    r = np.arange(size) - (size - 1) / 2
    g1 = np.exp(-0.5 * (r / sigma) ** 2)
    k = g1
    for _ in range(ndim - 1):
        k = np.multiply.outer(k, g1)
    return k / k.sum()


def _siddon_ray(origin, direction, nx, ny):
    """Intersection lengths of a ray with a unit-pixel ``ny x nx`` grid.

    The grid spans [-nx/2, nx/2] x [-ny/2, ny/2]; row index grows with y.
    Returns (flat pixel indices, lengths) with row-major indexing.
    """
    ox, oy = origin
    dx, dy = direction
    xlo, xhi = -nx / 2.0, nx / 2.0
    ylo, yhi = -ny / 2.0, ny / 2.0

    # clip the infinite line to the grid box
    tmin, tmax = -np.inf, np.inf
    for o, d, lo, hi in ((ox, dx, xlo, xhi), (oy, dy, ylo, yhi)):
        if abs(d) < 1e-15:
            if o <= lo or o >= hi:
                return np.empty(0, dtype=int), np.empty(0)
            continue
        t0, t1 = (lo - o) / d, (hi - o) / d
        tmin, tmax = max(tmin, min(t0, t1)), min(tmax, max(t0, t1))
    if tmax <= tmin:
        return np.empty(0, dtype=int), np.empty(0)

    ts = [np.array([tmin, tmax])]
    if abs(dx) >= 1e-15:
        tx = (np.arange(nx + 1) + xlo - ox) / dx
        ts.append(tx[(tx > tmin) & (tx < tmax)])
    if abs(dy) >= 1e-15:
        ty = (np.arange(ny + 1) + ylo - oy) / dy
        ts.append(ty[(ty > tmin) & (ty < tmax)])
    t = np.unique(np.concatenate(ts))
    lengths = np.diff(t)
    mid = 0.5 * (t[:-1] + t[1:])
    col = np.floor(ox + mid * dx - xlo).astype(int)
    row = np.floor(oy + mid * dy - ylo).astype(int)
    keep = (lengths > 1e-12) & (col >= 0) & (col < nx) & (row >= 0) & (row < ny)
    return row[keep] * nx + col[keep], lengths[keep]


class ParallelBeamProjector(LinearOperator):
    """2-D parallel-beam projector with exact ray/pixel intersection lengths.

    Rays are indexed angle-major: measurement ``a * n_detectors + b``. Angles
    are in radians; detector bins are centered on the rotation axis with
    spacing ``detector_spacing`` (pixel units).
    """

    kind = "projector"

    def __init__(self, grid_shape, angles, n_detectors, detector_spacing=1.0):
        ny, nx = (int(s) for s in grid_shape)
        angles = np.asarray(angles, dtype=float).ravel()
        n_detectors = int(n_detectors)
        super().__init__(nx * ny, angles.size * n_detectors)
        self.grid_shape = (ny, nx)
        self.angles = angles
        self.n_detectors = n_detectors
        self.detector_spacing = float(detector_spacing)

        offsets = (np.arange(n_detectors) - (n_detectors - 1) / 2.0) * self.detector_spacing
        rows, cols, vals = [], [], []
        for a, theta in enumerate(angles):
            normal = (np.cos(theta), np.sin(theta))
            direction = (-np.sin(theta), np.cos(theta))
            for b, s in enumerate(offsets):
                idx, lengths = _siddon_ray((s * normal[0], s * normal[1]), direction, nx, ny)
                rows.append(np.full(idx.size, a * n_detectors + b))
                cols.append(idx)
                vals.append(lengths)
        matrix = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=self.shape,
        )
        matrix.sum_duplicates()
        self.matrix = matrix
        self._matrix_t = matrix.T.tocsr()
        self._squared = matrix.multiply(matrix).tocsr()
        self._squared_t = self._squared.T.tocsr()

    def _apply(self, f):
        return self.matrix @ f

    def _adjoint(self, g):
        return self._matrix_t @ g

    def _weighted_gram_diagonal(self, w):
        return self._squared_t @ w

    def _row_weighted_square_sum(self, v):
        return self._squared @ v

    def to_dense(self):
        return self.matrix.toarray()


def load_dense_csv(path):
    """Read a dense operator from CSV: header ``M,N`` then M rows of N values."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"operator file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        m, n = int(header[0]), int(header[1])
        rows = [[float(v) for v in row] for row in reader if row]
    matrix = np.array(rows, dtype=float)
    if matrix.shape != (m, n):
        raise DimensionError(f"{path}: header says {m}x{n}, body is {matrix.shape}")
    return DenseOperator(matrix)


def save_dense_csv(path, matrix):
    matrix = np.asarray(matrix, dtype=float)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(matrix.shape)
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])
