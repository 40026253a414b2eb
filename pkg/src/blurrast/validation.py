"""Input validation helpers shared by the public entry points."""

import numpy as np


def check_vertices(vertices):
    V = np.ascontiguousarray(vertices, dtype=np.float64)
    if V.ndim != 2 or (V.size and V.shape[1] != 3):
        raise ValueError(f"vertices must have shape (N, 3), got {V.shape}")
    V = V.reshape(-1, 3)
    if not np.all(np.isfinite(V)):
        raise ValueError("vertices contain NaN or Inf")
    return V


def check_faces(faces, n_vertices):
    F = np.asarray(faces)
    if F.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if F.ndim != 2 or F.shape[1] != 3:
        raise ValueError(f"faces must have shape (F, 3), got {F.shape}")
    if not np.issubdtype(F.dtype, np.integer):
        if not np.all(F == np.round(F)):
            raise ValueError("face indices must be integers")
    F = np.ascontiguousarray(F, dtype=np.int64)
    if F.min() < 0 or F.max() >= n_vertices:
        raise IndexError(f"face index out of range for {n_vertices} vertices")
    if np.any((F[:, 0] == F[:, 1]) | (F[:, 1] == F[:, 2]) | (F[:, 0] == F[:, 2])):
        raise ValueError("a face repeats a vertex index")
    return F


def check_colors(colors, n_vertices):
    C = np.ascontiguousarray(colors, dtype=np.float64).reshape(-1, 3) if np.size(colors) else np.zeros((0, 3))
    if len(C) != n_vertices:
        raise ValueError(f"expected {n_vertices} colors, got {len(C)}")
    if not np.all(np.isfinite(C)):
        raise ValueError("colors contain NaN or Inf")
    if C.size and (C.min() < 0.0 or C.max() > 1.0):
        raise ValueError(f"colors must lie in [0, 1], got range [{C.min():.3g}, {C.max():.3g}]")
    return C


def check_image_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def check_triangle_matrix(F):
    F = np.asarray(F, dtype=np.float64)
    if F.shape != (3, 3):
        raise ValueError(f"triangle matrix must be 3x3, got {F.shape}")
    if not np.array_equal(F[2], np.ones(3)):
        raise ValueError("triangle matrix last row must be (1, 1, 1)")
    return F
