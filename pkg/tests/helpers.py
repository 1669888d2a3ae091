"""Small mesh and state builders used across test modules."""

import numpy as np

from thermodamage.mesh import DIRICHLET, NEUMANN, DofMap, Mesh2D


def single_triangle(p=((0.0, 0.0), (1.0, 0.0), (0.0, 1.0)), labels=(DIRICHLET, NEUMANN, NEUMANN)):
    nodes = np.array(p, dtype=float)
    return Mesh2D(nodes, np.array([[0, 1, 2]]), np.array([[0, 1], [1, 2], [2, 0]]), labels)


def random_displacement(mesh, rng, scale=0.1):
    u = scale * rng.normal(size=2 * mesh.n_nodes)
    u[DofMap.from_mesh(mesh).constrained] = 0.0
    return u


def central_difference(fun, x, d, h=1e-6):
    return (fun(x + h * d) - fun(x - h * d)) / (2.0 * h)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
