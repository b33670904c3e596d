"""Numpy fallback for the greedy farthest point sampling loop."""

import numpy as np


def fps_greedy(pts, seed, m):
    """Greedy max-min selection starting from ``seed``.

    Mirrors the compiled kernel operation-for-operation: squared distances are
    accumulated in the order x, y, z and argmax returns the first maximum, so
    both backends produce identical indices on identical input.
    """
    out = np.empty(m, dtype=np.int64)
    out[0] = seed
    diff = pts - pts[seed]
    mind2 = diff[:, 0] ** 2 + diff[:, 1] ** 2 + diff[:, 2] ** 2
    for k in range(1, m):
        nxt = int(np.argmax(mind2))
        out[k] = nxt
        diff = pts - pts[nxt]
        d2 = diff[:, 0] ** 2 + diff[:, 1] ** 2 + diff[:, 2] ** 2
        np.minimum(mind2, d2, out=mind2)
    return out
