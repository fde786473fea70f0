"""Dense order-d tensors: outer products, contractions, norms and unfoldings.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order, so entry
``(p_1, ..., p_d)`` lives at flat offset ``sum_l p_l * prod_{m>l} n_m`` and
mode 1 varies slowest.  A "vector tuple" is any sequence of ``d`` 1-d arrays,
the ``l``-th of length ``n_l``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = [
    "as_tensor",
    "outer_product",
    "contract_full",
    "contract_partial",
    "contract_two_holes",
    "inner",
    "frobenius",
    "unfold",
    "fold",
    "normalize",
]


def as_tensor(t) -> np.ndarray:
    """Return ``t`` as a C-contiguous float64 array of order >= 2."""
    arr = np.ascontiguousarray(t, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError(f"tensor order must be >= 2, got {arr.ndim}")
    if arr.size == 0:
        raise ValueError("tensor has a zero-length mode")
    return arr


def _as_vectors(vectors: Sequence) -> list[np.ndarray]:
    if len(vectors) == 0:
        raise ValueError("empty vector list")
    out = []
    for ell, v in enumerate(vectors):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError(f"vector {ell} is not one-dimensional")
        if v.size == 0:
            raise ValueError(f"vector {ell} has zero length")
        out.append(v)
    return out


def _check_lengths(t: np.ndarray, vecs: list[np.ndarray], skip=()) -> None:
    if len(vecs) != t.ndim:
        raise ValueError(f"expected {t.ndim} vectors, got {len(vecs)}")
    for ell, (n, v) in enumerate(zip(t.shape, vecs)):
        if ell in skip:
            continue
        if v.shape[0] != n:
            raise ValueError(f"vector {ell} has length {v.shape[0]}, mode has size {n}")


def normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm."""
    nrm = np.linalg.norm(v)
    if nrm == 0.0:
        raise ZeroDivisionError("cannot normalize a zero vector")
    return v / nrm


def outer_product(vectors: Sequence, weight: float = 1.0) -> np.ndarray:
    """``weight * v_1 (x) ... (x) v_d``."""
    vecs = _as_vectors(vectors)
    if len(vecs) < 2:
        raise ValueError("outer product needs at least two vectors")
    out = weight * vecs[0]
    for v in vecs[1:]:
        out = np.multiply.outer(out, v)
    return np.ascontiguousarray(out)


def _reduce(t: np.ndarray, vecs: list[np.ndarray], keep: tuple[int, ...]) -> np.ndarray:
    # Contract every mode not in `keep`, highest mode first.
    arr = t
    for m in range(t.ndim - 1, -1, -1):
        if m in keep:
            continue
        if m == arr.ndim - 1:
            arr = arr @ vecs[m]
        else:
            arr = np.tensordot(arr, vecs[m], axes=([m], [0]))
    return arr


def contract_full(t, vectors: Sequence) -> float:
    """``T(v_1, ..., v_d) = sum T[p] prod_l v_l[p_l]``."""
    t = as_tensor(t)
    vecs = _as_vectors(vectors)
    _check_lengths(t, vecs)
    return float(_reduce(t, vecs, ()))


def contract_partial(t, vectors: Sequence, hole: int) -> np.ndarray:
    """Contract on every mode except ``hole`` (0-based); returns a vector of length ``n_hole``.

    The entry at position ``hole`` of ``vectors`` is ignored and may be ``None``.
    """
    t = as_tensor(t)
    if not 0 <= hole < t.ndim:
        raise IndexError(f"hole {hole} out of range for order {t.ndim}")
    vectors = list(vectors)
    if len(vectors) == t.ndim and vectors[hole] is None:
        vectors[hole] = np.zeros(t.shape[hole])
    vecs = _as_vectors(vectors)
    _check_lengths(t, vecs, skip=(hole,))
    return _reduce(t, vecs, (hole,))


def contract_two_holes(t, vectors: Sequence, holes: tuple[int, int]) -> np.ndarray:
    """Contract on all modes but two; returns the ``n_l x n_m`` matrix for ``holes = (l, m)``, ``l < m``."""
    t = as_tensor(t)
    ell, m = holes
    if t.ndim < 3:
        raise ValueError("two-hole contraction needs order >= 3")
    if ell == m:
        raise ValueError("holes must be distinct")
    if not (0 <= ell < t.ndim and 0 <= m < t.ndim):
        raise IndexError(f"holes {holes} out of range for order {t.ndim}")
    vectors = list(vectors)
    for k in (ell, m):
        if vectors[k] is None:
            vectors[k] = np.zeros(t.shape[k])
    vecs = _as_vectors(vectors)
    _check_lengths(t, vecs, skip=(ell, m))
    out = _reduce(t, vecs, (min(ell, m), max(ell, m)))
    return out if ell < m else out.T


def inner(t, s) -> float:
    """Entrywise inner product of two tensors of equal shape."""
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {s.shape}")
    return float(np.dot(t.ravel(), s.ravel()))


def frobenius(t) -> float:
    return float(np.sqrt(inner(t, t)))


def unfold(t, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization, shape ``n_mode x prod_{m != mode} n_m``.

    Columns follow the row-major order of the remaining modes (later modes fastest).
    """
    t = as_tensor(t)
    if not 0 <= mode < t.ndim:
        raise IndexError(f"mode {mode} out of range for order {t.ndim}")
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)


def fold(mat: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    shape = tuple(int(n) for n in shape)
    rest = shape[:mode] + shape[mode + 1:]
    arr = np.asarray(mat, dtype=np.float64).reshape((shape[mode],) + rest)
    return np.ascontiguousarray(np.moveaxis(arr, 0, mode))
