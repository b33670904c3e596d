"""Farthest point sampling kernels.

The greedy max-min recurrence is the hot inner loop of clip standardization
(it runs once per frame over the whole corpus). A compiled Cython kernel is
preferred when the extension was built; a pure numpy implementation is the
fallback, selected at import time. Both evaluate the identical floating-point
recurrence, so their outputs are bitwise-equal.
"""

import numpy as np

from ._fps_np import fps_greedy as _fps_greedy_np

try:
    from ._fps_cy import fps_greedy as _fps_greedy_cy

    HAVE_COMPILED = True
except ImportError:
    _fps_greedy_cy = None
    HAVE_COMPILED = False

BACKEND = "cython" if HAVE_COMPILED else "numpy"

_IMPLS = {"numpy": _fps_greedy_np}
if HAVE_COMPILED:
    _IMPLS["cython"] = _fps_greedy_cy


def available_backends():
    return tuple(sorted(_IMPLS))


def fps_indices(points, m, backend=None):
    """Select ``m`` indices by greedy farthest point sampling.

    The first index is the point farthest from the centroid; each subsequent
    index maximizes the minimum squared Euclidean distance to the already
    selected set. All ties break to the lowest index, so the result is
    deterministic and permutation-stable.

    Args:
        points: ``[N, 3]`` coordinates.
        m: number of indices to select, ``1 <= m <= N``.
        backend: ``"cython"``, ``"numpy"`` or None for the default.

    Returns:
        ``[m]`` int64 index array.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be [N, 3], got shape {pts.shape}")
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"target m={m} must satisfy 1 <= m <= N={n}")
    impl = _IMPLS[backend or BACKEND]
    # Seed selection is shared across backends so float summation order in the
    # centroid reduction cannot make them disagree.
    centroid = pts.mean(axis=0)
    d2 = ((pts - centroid) ** 2).sum(axis=1)
    seed = int(np.argmax(d2))
    return np.asarray(impl(pts, seed, m), dtype=np.int64)
