"""NumPy implementations of the compiled kernels in ``_kernels.pyx``."""

import numpy as np

_CHUNK_BYTES = 32 * 2**20


def locate_points(points, inv, origin, box_lo, box_hi, tol):
    points = np.ascontiguousarray(points, dtype=float)
    p, k = len(points), len(inv)
    elem = np.full(p, -1, dtype=np.int64)
    bary = np.zeros((p, 4))
    chunk = max(1, _CHUNK_BYTES // (6 * max(k, 1)))
    for start in range(0, p, chunk):
        x = points[start:start + chunk]
        # bounding boxes first, barycentrics only for the surviving pairs
        near = np.all((x[:, None, :] >= box_lo) & (x[:, None, :] <= box_hi), axis=2)
        rows, cols = np.nonzero(near)
        lam = np.einsum("cij,cj->ci", inv[cols], x[rows] - origin[cols])
        lam0 = 1.0 - lam.sum(axis=1)
        ok = (lam.min(axis=1) >= -tol) & (lam0 >= -tol)
        rows, cols, lam, lam0 = rows[ok], cols[ok], lam[ok], lam0[ok]
        # pairs come sorted by point then element: keep the first element per point
        first = np.r_[True, rows[1:] != rows[:-1]]
        rows, cols = rows[first], cols[first]
        elem[start + rows] = cols
        bary[start + rows, 0] = lam0[first]
        bary[start + rows, 1:] = lam[first]
    return elem, bary


def radical_inverse_block(start, count, bases):
    n = np.arange(start, start + count, dtype=np.int64)
    out = np.empty((count, len(bases)))
    for j, b in enumerate(bases):
        b = int(b)
        rem = n.copy()
        f = 1.0 / b
        r = np.zeros(count)
        while np.any(rem > 0):
            r += f * (rem % b)
            rem //= b
            f /= b
        out[:, j] = r
    return out


def first_crossing(series, threshold):
    above = np.asarray(series) >= threshold
    idx = np.argmax(above, axis=1).astype(np.int64)
    idx[~above.any(axis=1)] = -1
    return idx


def element_stiffness(grads, vol, tensors):
    return vol[:, None, None] * np.einsum("eia,eab,ejb->eij", grads, tensors, grads)
