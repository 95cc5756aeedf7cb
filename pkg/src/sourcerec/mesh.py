"""Structured meshes with a buffer zone around the region of interest."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidExtent, ShapeMismatch

_EPS = 1e-9


@dataclass(frozen=True)
class Mesh:
    """Node coordinates, cells and masks.

    Attributes
    ----------
    dim : int
        1 (segments) or 2 (triangles).
    coords : ndarray, shape (n, dim)
    cells : ndarray of int, shape (n_cells, dim + 1)
    interior : ndarray of bool
        True for nodes inside the region of interest (buffer nodes False).
    boundary : ndarray of int
        Nodes on the outer boundary of the meshed domain.
    region : tuple
        Extent of the region of interest, ``(a, b)`` in 1-D and
        ``((x0, x1), (y0, y1))`` in 2-D.
    """

    dim: int
    coords: np.ndarray
    cells: np.ndarray
    interior: np.ndarray
    boundary: np.ndarray
    region: tuple = field(default=())

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[1] != self.dim:
            raise ShapeMismatch(f"coords must be (n, {self.dim})")
        if self.cells.shape[1] != self.dim + 1:
            raise ShapeMismatch(f"cells must have {self.dim + 1} nodes each")
        if self.interior.shape != (self.n_nodes,):
            raise ShapeMismatch("interior mask length differs from node count")

    @property
    def n_nodes(self):
        return self.coords.shape[0]

    @property
    def n_cells(self):
        return self.cells.shape[0]

    @property
    def x(self):
        return self.coords[:, 0]

    def cell_measures(self):
        """Signed lengths (1-D) or signed areas (2-D) of the cells."""
        p = self.coords[self.cells]
        if self.dim == 1:
            return p[:, 1, 0] - p[:, 0, 0]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def measure(self):
        return float(np.sum(self.cell_measures()))

    def region_measure(self):
        if self.dim == 1:
            a, b = self.region
            return b - a
        (x0, x1), (y0, y1) = self.region
        return (x1 - x0) * (y1 - y0)

    def check(self):
        """Verify the structural invariants; raise ShapeMismatch on failure."""
        n = self.n_nodes
        if self.cells.min() < 0 or self.cells.max() >= n:
            raise ShapeMismatch("cell refers to a missing node")
        for k in range(self.dim + 1):
            for j in range(k + 1, self.dim + 1):
                if np.any(self.cells[:, k] == self.cells[:, j]):
                    raise ShapeMismatch("cell with repeated node")
        if np.any(self.cell_measures() <= 0):
            raise ShapeMismatch("cells must have positive orientation")
        if self.dim == 1 and np.any(np.diff(self.x) <= 0):
            raise ShapeMismatch("1-D nodes must be strictly increasing")
        return True


def build_interval_mesh(a, b, n_nodes, buffer=0.0):
    """Uniform 1-D mesh of ``[a - buffer, b + buffer]``.

    Nodes inside ``[a, b]`` are flagged as interior.

    Examples
    --------
    >>> m = build_interval_mesh(0, 10, 11, 5)
    >>> m.x[0], m.x[-1], int(m.interior.sum())
    (-5.0, 15.0, 5)
    """
    if not b > a:
        raise InvalidExtent(f"need b > a, got a={a}, b={b}")
    if n_nodes < 2:
        raise InvalidExtent("need at least two nodes")
    if buffer < 0:
        raise InvalidExtent("buffer must be non-negative")
    lo, hi = a - buffer, b + buffer
    x = np.linspace(lo, hi, int(n_nodes))
    tol = _EPS * (hi - lo)
    interior = (x >= a - tol) & (x <= b + tol)
    idx = np.arange(n_nodes)
    cells = np.column_stack([idx[:-1], idx[1:]])
    return Mesh(1, x[:, None], cells, interior, np.array([0, n_nodes - 1]), (float(a), float(b)))


def build_rect_mesh(x_extent, y_extent, nx, ny, buffer=0.0):
    """Structured triangulation of a buffered rectangle.

    Each grid quad is split into two right triangles along the diagonal from
    its lower-left to its upper-right corner.  Node ``(i, j)`` (column ``i``
    along x, row ``j`` along y) has index ``j * nx + i``.
    """
    (x0, x1), (y0, y1) = x_extent, y_extent
    if not (x1 > x0 and y1 > y0):
        raise InvalidExtent("rectangle extents must be increasing")
    if nx < 2 or ny < 2:
        raise InvalidExtent("need at least two nodes per direction")
    if buffer < 0:
        raise InvalidExtent("buffer must be non-negative")
    xs = np.linspace(x0 - buffer, x1 + buffer, int(nx))
    ys = np.linspace(y0 - buffer, y1 + buffer, int(ny))
    X, Y = np.meshgrid(xs, ys)
    coords = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1))
    ll = (j * nx + i).ravel()
    lr, ul, ur = ll + 1, ll + nx, ll + nx + 1
    cells = np.concatenate([np.column_stack([ll, lr, ur]), np.column_stack([ll, ur, ul])])
    tx = _EPS * (xs[-1] - xs[0])
    ty = _EPS * (ys[-1] - ys[0])
    interior = ((coords[:, 0] >= x0 - tx) & (coords[:, 0] <= x1 + tx)
                & (coords[:, 1] >= y0 - ty) & (coords[:, 1] <= y1 + ty))
    gi, gj = np.meshgrid(np.arange(nx), np.arange(ny))
    edge = (gi == 0) | (gi == nx - 1) | (gj == 0) | (gj == ny - 1)
    boundary = np.flatnonzero(edge.ravel())
    return Mesh(2, coords, cells, interior, boundary,
                ((float(x0), float(x1)), (float(y0), float(y1))))


# ----------------------------------------------------------------------
# CSV interchange

def write_mesh_csv(mesh, node_path, cell_path):
    names = ["id", "x"] + (["y"] if mesh.dim == 2 else []) + ["interior"]
    with open(node_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for k in range(mesh.n_nodes):
            w.writerow([k, *(repr(float(c)) for c in mesh.coords[k]), int(mesh.interior[k])])
    with open(cell_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"n{k}" for k in range(mesh.dim + 1)])
        w.writerows(mesh.cells.tolist())


def read_mesh_csv(node_path, cell_path):
    """Read a mesh written by :func:`write_mesh_csv`.

    The region of interest is taken as the bounding box of the interior
    nodes; the boundary is the set of nodes on the bounding box of all
    nodes.
    """
    with open(node_path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ShapeMismatch(f"{Path(node_path).name}: no nodes")
    dim = 2 if "y" in rows[0] else 1
    ids = np.array([int(r["id"]) for r in rows])
    order = np.argsort(ids)
    if not np.array_equal(ids[order], np.arange(len(ids))):
        raise ShapeMismatch("node ids must be 0..n-1")
    keys = ["x", "y"][:dim]
    coords = np.array([[float(r[k]) for k in keys] for r in rows])[order]
    interior = np.array([r["interior"].strip() not in ("0", "false", "False") for r in rows])[order]
    cells = np.loadtxt(cell_path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    on_hull = np.any(np.isclose(coords, lo) | np.isclose(coords, hi), axis=1)
    ic = coords[interior] if interior.any() else coords
    if dim == 1:
        region = (float(ic[:, 0].min()), float(ic[:, 0].max()))
    else:
        region = ((float(ic[:, 0].min()), float(ic[:, 0].max())),
                  (float(ic[:, 1].min()), float(ic[:, 1].max())))
    mesh = Mesh(dim, coords, cells, interior, np.flatnonzero(on_hull), region)
    mesh.check()
    return mesh
