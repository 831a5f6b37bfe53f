"""Numpy reference versions of the hot kernels.

Same signatures and semantics as the compiled ``_ckernels`` module. All
arrays are float64 and C-contiguous on the way in.
"""
import numpy as np


def im2col3d(x, k):
    """Unfold zero-padded ``k**3`` neighbourhoods of a 5-D batch.

    Parameters
    ----------
    x : ndarray, shape (B, C, X, Y, Z)
    k : int
        Odd kernel edge length.

    Returns
    -------
    ndarray, shape (C * k**3, B * X * Y * Z)
        Row index is ``(c, a, b, d)`` flattened in C order, column index is
        ``(batch, x, y, z)`` flattened in C order.
    """
    B, C, X, Y, Z = x.shape
    p = k // 2
    xp = np.zeros((C, B, X + 2 * p, Y + 2 * p, Z + 2 * p))
    xp[:, :, p:p + X, p:p + Y, p:p + Z] = x.transpose(1, 0, 2, 3, 4)
    cols = np.empty((C, k, k, k, B, X, Y, Z))
    for a in range(k):
        for b in range(k):
            for d in range(k):
                cols[:, a, b, d] = xp[:, :, a:a + X, b:b + Y, d:d + Z]
    return cols.reshape(C * k ** 3, B * X * Y * Z)


def col2im3d(cols, shape, k):
    """Adjoint of :func:`im2col3d`: scatter-add columns back to a batch."""
    B, C, X, Y, Z = shape
    p = k // 2
    c6 = cols.reshape(C, k, k, k, B, X, Y, Z)
    xp = np.zeros((C, B, X + 2 * p, Y + 2 * p, Z + 2 * p))
    for a in range(k):
        for b in range(k):
            for d in range(k):
                xp[:, :, a:a + X, b:b + Y, d:d + Z] += c6[:, a, b, d]
    return np.ascontiguousarray(xp[:, :, p:p + X, p:p + Y, p:p + Z].transpose(1, 0, 2, 3, 4))


def box_mean3(x):
    """3x3x3 zero-padded mean over the last three axes (divisor always 27)."""
    lead = x.shape[:-3]
    X, Y, Z = x.shape[-3:]
    v = x.reshape((-1, X, Y, Z))
    out = np.zeros_like(v)
    # separable sums keep the cost at 3 passes
    s = v.copy()
    s[:, 1:] += v[:, :-1]
    s[:, :-1] += v[:, 1:]
    t = s.copy()
    t[:, :, 1:] += s[:, :, :-1]
    t[:, :, :-1] += s[:, :, 1:]
    out[:] = t
    out[:, :, :, 1:] += t[:, :, :, :-1]
    out[:, :, :, :-1] += t[:, :, :, 1:]
    out /= 27.0
    return out.reshape(lead + (X, Y, Z))


def trilinear_sample(vol, coords):
    """Sample ``vol`` (X, Y, Z) at fractional voxel ``coords`` (3, M); 0 outside."""
    X, Y, Z = vol.shape
    cx, cy, cz = coords
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    z0 = np.floor(cz).astype(np.int64)
    fx, fy, fz = cx - x0, cy - y0, cz - z0
    out = np.zeros(cx.shape[0])
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        ix = x0 + dx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            iy = y0 + dy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                iz = z0 + dz
                ok = (ix >= 0) & (ix < X) & (iy >= 0) & (iy < Y) & (iz >= 0) & (iz < Z)
                w = wx * wy * wz
                val = np.zeros_like(out)
                val[ok] = vol[ix[ok], iy[ok], iz[ok]]
                out += w * val
    return out


def nearest_sample(vol, coords):
    """Nearest-neighbour lookup of integer ``vol`` at ``coords``; 0 outside."""
    X, Y, Z = vol.shape
    ix = np.floor(coords[0] + 0.5).astype(np.int64)
    iy = np.floor(coords[1] + 0.5).astype(np.int64)
    iz = np.floor(coords[2] + 0.5).astype(np.int64)
    ok = (ix >= 0) & (ix < X) & (iy >= 0) & (iy < Y) & (iz >= 0) & (iz < Z)
    out = np.zeros(coords.shape[1], dtype=np.int64)
    out[ok] = vol[ix[ok], iy[ok], iz[ok]]
    return out
