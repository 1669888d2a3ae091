"""Conforming P1 triangle meshes with labelled boundary parts.

Mesh text format (``#`` starts a comment)::

    NODES k
    id x y
    ...
    TRIANGLES m
    id n1 n2 n3
    ...
    BOUNDARY b
    id n1 n2 LABEL        # LABEL is DIRICHLET or NEUMANN

Ids are 0-based and dense.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, MeshParseError, MeshValidationError

log = logging.getLogger(__name__)

DIRICHLET = "DIRICHLET"
NEUMANN = "NEUMANN"
LABELS = (DIRICHLET, NEUMANN)
SIDES = ("left", "right", "bottom", "top")


def _signed_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0, p1, p2 = (nodes[triangles[:, i]] for i in range(3))
    d1 = p1 - p0
    d2 = p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _edge_key(a: int, b: int) -> tuple:
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True, eq=False)
class Mesh2D:
    """Triangulated polygonal domain.

    Attributes
    ----------
    nodes : (N, 2) float array
    triangles : (M, 3) int array, counterclockwise
    boundary_edges : (B, 2) int array
    labels : tuple of str, one of ``DIRICHLET``/``NEUMANN`` per boundary edge
    edge_sides : optional tuple naming the side of the unit square for
        generated meshes (``None`` for meshes read from file)
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    labels: tuple
    edge_sides: Optional[tuple] = None
    normals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=float)
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64)
        edges = np.ascontiguousarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        for name, arr in (("nodes", nodes), ("triangles", tris), ("boundary_edges", edges)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.edge_sides is not None:
            object.__setattr__(self, "edge_sides", tuple(self.edge_sides))
        self._validate()
        object.__setattr__(self, "normals", self._outward_normals())

    # -- validation -----------------------------------------------------
    def _validate(self):
        nodes, tris, edges = self.nodes, self.triangles, self.boundary_edges
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshValidationError("nodes must be an (N, 2) array")
        if tris.ndim != 2 or tris.shape[1] != 3 or len(tris) == 0:
            raise MeshValidationError("triangles must be a nonempty (M, 3) array")
        n = len(nodes)
        if tris.min() < 0 or tris.max() >= n or (len(edges) and (edges.min() < 0 or edges.max() >= n)):
            raise MeshValidationError("node index out of range")
        areas = _signed_areas(nodes, tris)
        bad = np.flatnonzero(areas <= 0.0)
        if bad.size:
            raise MeshValidationError(
                f"triangle {int(bad[0])} has nonpositive signed area {areas[bad[0]]:.3e} "
                "(clockwise or degenerate)"
            )
        if len(self.labels) != len(edges):
            raise MeshValidationError("one label per boundary edge required")
        for i, lab in enumerate(self.labels):
            if lab not in LABELS:
                raise MeshValidationError(f"boundary edge {i} has invalid label {lab!r}")
        if DIRICHLET not in self.labels:
            raise MeshValidationError("the Dirichlet boundary part must be nonempty")

        counts: dict = {}
        for t in tris:
            for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                k = _edge_key(int(a), int(b))
                counts[k] = counts.get(k, 0) + 1
        if any(c > 2 for c in counts.values()):
            raise MeshValidationError("nonmanifold edge shared by more than two triangles")
        topo = {k for k, c in counts.items() if c == 1}
        given = [_edge_key(int(a), int(b)) for a, b in edges]
        if len(set(given)) != len(given):
            raise MeshValidationError("duplicate boundary edge")
        missing = topo - set(given)
        if missing:
            a, b = sorted(missing)[0]
            raise MeshValidationError(f"boundary edge ({a}, {b}) has no label")
        extra = set(given) - topo
        if extra:
            a, b = sorted(extra)[0]
            raise MeshValidationError(f"edge ({a}, {b}) listed as boundary but is interior or absent")

    def _outward_normals(self) -> np.ndarray:
        owner = {}
        for t in self.triangles:
            for a, b, c in ((t[0], t[1], t[2]), (t[1], t[2], t[0]), (t[2], t[0], t[1])):
                owner[_edge_key(int(a), int(b))] = int(c)
        normals = np.empty((len(self.boundary_edges), 2))
        for i, (a, b) in enumerate(self.boundary_edges):
            pa, pb = self.nodes[a], self.nodes[b]
            d = pb - pa
            nrm = np.array([d[1], -d[0]]) / np.hypot(*d)
            opposite = self.nodes[owner[_edge_key(int(a), int(b))]]
            if np.dot(nrm, opposite - 0.5 * (pa + pb)) > 0:
                nrm = -nrm
            normals[i] = nrm
        normals.setflags(write=False)
        return normals

    # -- derived quantities ---------------------------------------------
    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def areas(self) -> np.ndarray:
        return _signed_areas(self.nodes, self.triangles)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        d = self.nodes[self.boundary_edges[:, 1]] - self.nodes[self.boundary_edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def dirichlet_mask(self) -> np.ndarray:
        return np.array([lab == DIRICHLET for lab in self.labels], dtype=bool)

    def edges_on(self, sides: Optional[Iterable[str]] = None, label: Optional[str] = None) -> np.ndarray:
        """Indices of boundary edges filtered by side tag and/or label."""
        sel = np.ones(len(self.boundary_edges), dtype=bool)
        if label is not None:
            sel &= np.array([lab == label for lab in self.labels], dtype=bool)
        if sides is not None:
            sides = set(sides)
            if self.edge_sides is None:
                raise ConfigurationError("side selection requires a generated mesh with side tags")
            sel &= np.array([s in sides for s in self.edge_sides], dtype=bool)
        return np.flatnonzero(sel)


@dataclass(frozen=True, eq=False)
class DofMap:
    """Scalar and vector P1 degree-of-freedom numbering.

    Scalar dof of node ``i`` is ``i``; vector dofs are ``2*i`` and ``2*i + 1``.
    """

    n_nodes: int
    constrained: np.ndarray
    free: np.ndarray

    @classmethod
    def from_mesh(cls, mesh: Mesh2D) -> "DofMap":
        dnodes = np.unique(mesh.boundary_edges[mesh.dirichlet_mask].ravel())
        constrained = np.sort(np.concatenate([2 * dnodes, 2 * dnodes + 1]))
        mask = np.ones(2 * mesh.n_nodes, dtype=bool)
        mask[constrained] = False
        free = np.flatnonzero(mask)
        constrained.setflags(write=False)
        free.setflags(write=False)
        return cls(mesh.n_nodes, constrained, free)

    @property
    def n_scalar(self) -> int:
        return self.n_nodes

    @property
    def n_vector(self) -> int:
        return 2 * self.n_nodes

    @cached_property
    def constrained_nodes(self) -> np.ndarray:
        return np.unique(self.constrained // 2)

    def vector_dof(self, node, component):
        return 2 * np.asarray(node) + np.asarray(component)

    def node_of(self, dof):
        """Inverse of :meth:`vector_dof`: returns ``(node, component)``."""
        dof = np.asarray(dof)
        return dof // 2, dof % 2

    def scalar_dof(self, node):
        return np.asarray(node)

    def expand(self, u_free: np.ndarray) -> np.ndarray:
        u = np.zeros(self.n_vector)
        u[self.free] = u_free
        return u


def generate_unit_square(n: int, dirichlet_sides: Sequence[str]) -> Mesh2D:
    """Structured mesh of [0, 1]^2 with ``2 n^2`` triangles.

    Each cell is split along its (bottom-left, top-right) diagonal, which keeps
    every triangle right-angled and the P1 Laplacian an M-matrix.
    """
    if int(n) != n or n < 1:
        raise ConfigurationError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    sides = set(dirichlet_sides)
    if not sides:
        raise ConfigurationError("dirichlet_sides must be nonempty")
    unknown = sides - set(SIDES)
    if unknown:
        raise ConfigurationError(f"unknown side(s) {sorted(unknown)}; expected a subset of {SIDES}")

    x = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(x, x, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):  # column i, row j
        return j * (n + 1) + i

    tris = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))

    edges, tags = [], []
    for i in range(n):
        edges.append((nid(i, 0), nid(i + 1, 0)))
        tags.append("bottom")
    for j in range(n):
        edges.append((nid(n, j), nid(n, j + 1)))
        tags.append("right")
    for i in range(n, 0, -1):
        edges.append((nid(i, n), nid(i - 1, n)))
        tags.append("top")
    for j in range(n, 0, -1):
        edges.append((nid(0, j), nid(0, j - 1)))
        tags.append("left")
    labels = [DIRICHLET if s in sides else NEUMANN for s in tags]
    return Mesh2D(nodes, np.array(tris), np.array(edges), labels, edge_sides=tags)


def _data_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def load_mesh(path, repair_orientation: bool = False) -> Mesh2D:
    """Read and validate a mesh in the text format described in the module docstring.

    Clockwise triangles are rejected unless ``repair_orientation`` is set, in
    which case two indices are swapped and a warning is logged.
    """
    text = Path(path).read_text()
    lines = list(_data_lines(text))
    pos = 0
    sections = {}

    def header(expected):
        nonlocal pos
        if pos >= len(lines):
            raise MeshParseError(f"missing section {expected}")
        lineno, tok = lines[pos]
        if len(tok) != 2 or tok[0].upper() != expected:
            raise MeshParseError(f"line {lineno}: expected '{expected} <count>', got {' '.join(tok)!r}")
        try:
            count = int(tok[1])
        except ValueError:
            raise MeshParseError(f"line {lineno}: bad count {tok[1]!r}") from None
        if count < 0:
            raise MeshParseError(f"line {lineno}: negative count")
        pos += 1
        return count

    def rows(count, width, name):
        nonlocal pos
        out = []
        for expect_id in range(count):
            if pos >= len(lines):
                raise MeshParseError(f"section {name}: expected {count} rows, found {expect_id}")
            lineno, tok = lines[pos]
            if len(tok) != width:
                raise MeshParseError(
                    f"line {lineno}: {name} row needs {width} fields, got {len(tok)}"
                )
            if tok[0] != str(expect_id):
                raise MeshParseError(f"line {lineno}: ids must be dense and 0-based (expected {expect_id})")
            out.append((lineno, tok[1:]))
            pos += 1
        return out

    try:
        node_rows = rows(header("NODES"), 3, "NODES")
        nodes = np.array([[float(v) for v in t] for _, t in node_rows]).reshape(-1, 2)
        tri_rows = rows(header("TRIANGLES"), 4, "TRIANGLES")
        tris = np.array([[int(v) for v in t] for _, t in tri_rows], dtype=np.int64).reshape(-1, 3)
        b_count = header("BOUNDARY")
        edge_rows = []
        for i in range(b_count):
            if pos >= len(lines):
                raise MeshParseError(f"section BOUNDARY: expected {b_count} rows, found {i}")
            lineno, tok = lines[pos]
            if len(tok) == 3:
                raise MeshValidationError(f"line {lineno}: boundary edge {tok[0]} has no label")
            if len(tok) != 4:
                raise MeshParseError(f"line {lineno}: BOUNDARY row needs 4 fields, got {len(tok)}")
            if tok[0] != str(i):
                raise MeshParseError(f"line {lineno}: ids must be dense and 0-based (expected {i})")
            label = tok[3].upper()
            if label not in LABELS:
                raise MeshValidationError(f"line {lineno}: boundary edge {i} has unknown label {tok[3]!r}")
            edge_rows.append(((int(tok[1]), int(tok[2])), label))
            pos += 1
    except ValueError as exc:
        if isinstance(exc, (MeshParseError, MeshValidationError)):
            raise
        raise MeshParseError(f"malformed number: {exc}") from None
    if pos != len(lines):
        raise MeshParseError(f"line {lines[pos][0]}: trailing content after BOUNDARY section")

    if len(tris) and (tris.min() < 0 or tris.max() >= len(nodes)):
        raise MeshValidationError("triangle references a nonexistent node")
    areas = _signed_areas(nodes, tris) if len(tris) else np.array([])
    for t in np.flatnonzero(areas < 0):
        if not repair_orientation:
            raise MeshValidationError(f"triangle {int(t)} is clockwise (signed area {areas[t]:.3e})")
        log.warning("triangle %d is clockwise; swapping its last two vertices", t)
        tris[t, [1, 2]] = tris[t, [2, 1]]
    edges = np.array([e for e, _ in edge_rows], dtype=np.int64).reshape(-1, 2)
    labels = [lab for _, lab in edge_rows]
    return Mesh2D(nodes, tris, edges, labels)


def write_mesh(mesh: Mesh2D, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"NODES {mesh.n_nodes}\n")
        for i, (x, y) in enumerate(mesh.nodes):
            fh.write(f"{i} {x:.17g} {y:.17g}\n")
        fh.write(f"TRIANGLES {mesh.n_triangles}\n")
        for i, t in enumerate(mesh.triangles):
            fh.write(f"{i} {t[0]} {t[1]} {t[2]}\n")
        fh.write(f"BOUNDARY {len(mesh.boundary_edges)}\n")
        for i, ((a, b), lab) in enumerate(zip(mesh.boundary_edges, mesh.labels)):
            fh.write(f"{i} {a} {b} {lab}\n")
