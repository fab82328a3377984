"""Hot inner loops, each in a compiled and a pure-numpy flavour.

Every public function takes an optional ``backend`` argument ("numba" or
"numpy"). By default the numba path is used unless it was disabled through
``MOODKIT_DISABLE_NUMBA``. The two paths agree to floating-point rounding;
within one path results are bit-reproducible.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided

from ._jit import HAVE_NUMBA, njit

_F2 = 0.5 * (np.sqrt(3.0) - 1.0)
_G2 = (3.0 - np.sqrt(3.0)) / 6.0

# xy components of the 12 edge gradients of the classic simplex lattice
GRAD2 = np.array(
    [[1, 1], [-1, 1], [1, -1], [-1, -1],
     [1, 0], [-1, 0], [1, 0], [-1, 0],
     [0, 1], [0, -1], [0, 1], [0, -1]],
    dtype=np.float64,
)


def _pick(backend):
    if backend is None:
        return "numba" if HAVE_NUMBA else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is disabled")
    return backend


# ---------------------------------------------------------------- simplex 2D


@njit(cache=True)
def _simplex2d_nb(xs, ys, perm, grad):
    F2 = 0.5 * (np.sqrt(3.0) - 1.0)
    G2 = (3.0 - np.sqrt(3.0)) / 6.0
    out = np.empty((ys.shape[0], xs.shape[0]))
    for r in range(ys.shape[0]):
        y = ys[r]
        for c in range(xs.shape[0]):
            x = xs[c]
            s = (x + y) * F2
            i = np.floor(x + s)
            j = np.floor(y + s)
            t = (i + j) * G2
            x0 = x - (i - t)
            y0 = y - (j - t)
            if x0 > y0:
                i1 = 1
                j1 = 0
            else:
                i1 = 0
                j1 = 1
            x1 = x0 - i1 + G2
            y1 = y0 - j1 + G2
            x2 = x0 - 1.0 + 2.0 * G2
            y2 = y0 - 1.0 + 2.0 * G2
            ii = int(i) & 255
            jj = int(j) & 255
            g0 = perm[ii + perm[jj]] % 12
            g1 = perm[ii + i1 + perm[jj + j1]] % 12
            g2 = perm[ii + 1 + perm[jj + 1]] % 12
            n = 0.0
            t0 = 0.5 - x0 * x0 - y0 * y0
            if t0 > 0:
                t0 *= t0
                n += t0 * t0 * (grad[g0, 0] * x0 + grad[g0, 1] * y0)
            t1 = 0.5 - x1 * x1 - y1 * y1
            if t1 > 0:
                t1 *= t1
                n += t1 * t1 * (grad[g1, 0] * x1 + grad[g1, 1] * y1)
            t2 = 0.5 - x2 * x2 - y2 * y2
            if t2 > 0:
                t2 *= t2
                n += t2 * t2 * (grad[g2, 0] * x2 + grad[g2, 1] * y2)
            out[r, c] = 70.0 * n
    return out


def _corner(x, y, g):
    t = 0.5 - x * x - y * y
    val = (t * t) * (t * t) * (GRAD2[g, 0] * x + GRAD2[g, 1] * y)
    return np.where(t > 0, val, 0.0)


def _simplex2d_np(xs, ys, perm):
    x, y = np.meshgrid(xs, ys)
    s = (x + y) * _F2
    i = np.floor(x + s)
    j = np.floor(y + s)
    t = (i + j) * _G2
    x0 = x - (i - t)
    y0 = y - (j - t)
    upper = x0 > y0
    i1 = upper.astype(np.int64)
    j1 = 1 - i1
    x1 = x0 - i1 + _G2
    y1 = y0 - j1 + _G2
    x2 = x0 - 1.0 + 2.0 * _G2
    y2 = y0 - 1.0 + 2.0 * _G2
    ii = i.astype(np.int64) & 255
    jj = j.astype(np.int64) & 255
    g0 = perm[ii + perm[jj]] % 12
    g1 = perm[ii + i1 + perm[jj + j1]] % 12
    g2 = perm[ii + 1 + perm[jj + 1]] % 12
    return 70.0 * (_corner(x0, y0, g0) + _corner(x1, y1, g1) + _corner(x2, y2, g2))


def simplex2d(xs, ys, perm, backend=None):
    """Single-octave 2D simplex noise on the grid ``ys x xs``.

    ``perm`` is a 512-entry int64 table (a 256 permutation repeated twice).
    Returns an array of shape ``(len(ys), len(xs))`` with values in about
    [-1, 1].
    """
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    if _pick(backend) == "numba":
        return _simplex2d_nb(xs, ys, perm, GRAD2)
    return _simplex2d_np(xs, ys, perm)


# ---------------------------------------------------------------- histogram


@njit(cache=True)
def _bin_counts_nb(values, n_bins):
    counts = np.zeros(n_bins, dtype=np.int64)
    for k in range(values.shape[0]):
        b = int(np.floor(values[k] * n_bins))
        if b > n_bins - 1:
            b = n_bins - 1
        if b < 0:
            b = 0
        counts[b] += 1
    return counts


def _bin_counts_np(values, n_bins):
    idx = np.clip(np.floor(values * n_bins).astype(np.int64), 0, n_bins - 1)
    return np.bincount(idx, minlength=n_bins).astype(np.int64)


def bin_counts(values, n_bins, backend=None):
    """Counts per bin with ``bin = min(floor(x * n_bins), n_bins - 1)``."""
    values = np.ascontiguousarray(np.ravel(values), dtype=np.float64)
    if _pick(backend) == "numba":
        return _bin_counts_nb(values, n_bins)
    return _bin_counts_np(values, n_bins)


# ---------------------------------------------------------------- otsu


@njit(cache=True)
def _otsu_nb(hist):
    total = 0.0
    weighted = 0.0
    for k in range(hist.shape[0]):
        total += hist[k]
        weighted += k * hist[k]
    best = -1.0
    best_k = 0
    w0 = 0.0
    s0 = 0.0
    for k in range(hist.shape[0] - 1):
        w0 += hist[k]
        s0 += k * hist[k]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        m0 = s0 / w0
        m1 = (weighted - s0) / w1
        var = w0 * w1 * (m0 - m1) ** 2
        if var > best:
            best = var
            best_k = k
    return best_k


def _otsu_np(hist):
    hist = hist.astype(np.float64)
    levels = np.arange(hist.size, dtype=np.float64)
    w0 = np.cumsum(hist)[:-1]
    s0 = np.cumsum(levels * hist)[:-1]
    w1 = hist.sum() - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = s0 / w0
        m1 = ((levels * hist).sum() - s0) / w1
        var = w0 * w1 * (m0 - m1) ** 2
    var[(w0 == 0) | (w1 == 0)] = -1.0
    return int(np.argmax(var))


def otsu_cut(hist, backend=None):
    """Index k maximising between-class variance of {<=k} vs {>k}."""
    hist = np.ascontiguousarray(hist, dtype=np.float64)
    if _pick(backend) == "numba":
        return int(_otsu_nb(hist))
    return _otsu_np(hist)


# ---------------------------------------------------------------- 3x3 im2col


@njit(cache=True)
def _im2col_nb(xpad):
    B, Hp, Wp, C = xpad.shape
    H = Hp - 2
    W = Wp - 2
    C3 = 3 * C
    cols = np.empty((B * H * W, 9 * C), dtype=xpad.dtype)
    flat = xpad.reshape(B * Hp * Wp * C)
    out = cols.reshape(cols.size)
    o = 0
    for b in range(B):
        for y in range(H):
            for x in range(W):
                # the three taps of one kernel row are contiguous in channels-last layout
                for dy in range(3):
                    s = ((b * Hp + y + dy) * Wp + x) * C
                    for k in range(C3):
                        out[o + k] = flat[s + k]
                    o += C3
    return cols


def _im2col_np(xpad):
    B, Hp, Wp, C = xpad.shape
    H, W = Hp - 2, Wp - 2
    sb, sy, sx, sc = xpad.strides
    view = as_strided(xpad, (B, H, W, 3, 3, C), (sb, sy, sx, sy, sx, sc), writeable=False)
    return view.reshape(B * H * W, 9 * C)


def im2col3x3(xpad, backend=None):
    """Unfold a zero-padded (B, H+2, W+2, C) batch into (B*H*W, 9*C) patches.

    Column order is tap-major (tap = dy*3 + dx), channel-minor. This one is
    a pure memory copy, which the strided numpy reshape already does at full
    bandwidth, so numpy is the default and numba runs only when asked for.
    """
    xpad = np.ascontiguousarray(xpad)
    if backend == "numba" and _pick(backend) == "numba":
        return _im2col_nb(xpad)
    return _im2col_np(xpad)


@njit(cache=True)
def _col2im_nb(dcols, B, H, W, C):
    out = np.zeros((B, H + 2, W + 2, C), dtype=dcols.dtype)
    row = 0
    for b in range(B):
        for y in range(H):
            for x in range(W):
                for dy in range(3):
                    for dx in range(3):
                        base = (dy * 3 + dx) * C
                        for c in range(C):
                            out[b, y + dy, x + dx, c] += dcols[row, base + c]
                row += 1
    return out


def _col2im_np(dcols, B, H, W, C):
    d = dcols.reshape(B, H, W, 9, C)
    out = np.zeros((B, H + 2, W + 2, C), dtype=dcols.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        out[:, dy:dy + H, dx:dx + W, :] += d[:, :, :, k, :]
    return out


def col2im3x3(dcols, shape, backend=None):
    """Adjoint of :func:`im2col3x3`; ``shape`` is the unpadded (B, H, W, C)."""
    B, H, W, C = shape
    dcols = np.ascontiguousarray(dcols)
    if _pick(backend) == "numba":
        return _col2im_nb(dcols, B, H, W, C)
    return _col2im_np(dcols, B, H, W, C)


# ---------------------------------------------------------------- trilinear


@njit(cache=True)
def _trilinear_nb(vol, zc, yc, xc, fill):
    nz, ny, nx = vol.shape
    out = np.empty(zc.shape[0], dtype=np.float64)
    for k in range(zc.shape[0]):
        z = zc[k]
        y = yc[k]
        x = xc[k]
        if z < 0 or y < 0 or x < 0 or z > nz - 1 or y > ny - 1 or x > nx - 1:
            out[k] = fill
            continue
        z0 = min(int(z), nz - 2) if nz > 1 else 0
        y0 = min(int(y), ny - 2) if ny > 1 else 0
        x0 = min(int(x), nx - 2) if nx > 1 else 0
        fz = z - z0
        fy = y - y0
        fx = x - x0
        z1 = min(z0 + 1, nz - 1)
        y1 = min(y0 + 1, ny - 1)
        x1 = min(x0 + 1, nx - 1)
        c00 = vol[z0, y0, x0] * (1 - fx) + vol[z0, y0, x1] * fx
        c01 = vol[z0, y1, x0] * (1 - fx) + vol[z0, y1, x1] * fx
        c10 = vol[z1, y0, x0] * (1 - fx) + vol[z1, y0, x1] * fx
        c11 = vol[z1, y1, x0] * (1 - fx) + vol[z1, y1, x1] * fx
        c0 = c00 * (1 - fy) + c01 * fy
        c1 = c10 * (1 - fy) + c11 * fy
        out[k] = c0 * (1 - fz) + c1 * fz
    return out


def _trilinear_np(vol, zc, yc, xc, fill):
    nz, ny, nx = vol.shape
    inside = (zc >= 0) & (yc >= 0) & (xc >= 0) & (zc <= nz - 1) & (yc <= ny - 1) & (xc <= nx - 1)
    z = np.where(inside, zc, 0.0)
    y = np.where(inside, yc, 0.0)
    x = np.where(inside, xc, 0.0)
    z0 = np.minimum(z.astype(np.int64), max(nz - 2, 0))
    y0 = np.minimum(y.astype(np.int64), max(ny - 2, 0))
    x0 = np.minimum(x.astype(np.int64), max(nx - 2, 0))
    fz, fy, fx = z - z0, y - y0, x - x0
    z1 = np.minimum(z0 + 1, nz - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    x1 = np.minimum(x0 + 1, nx - 1)
    c00 = vol[z0, y0, x0] * (1 - fx) + vol[z0, y0, x1] * fx
    c01 = vol[z0, y1, x0] * (1 - fx) + vol[z0, y1, x1] * fx
    c10 = vol[z1, y0, x0] * (1 - fx) + vol[z1, y0, x1] * fx
    c11 = vol[z1, y1, x0] * (1 - fx) + vol[z1, y1, x1] * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    return np.where(inside, c0 * (1 - fz) + c1 * fz, fill)


def trilinear_sample(vol, zc, yc, xc, fill=0.0, backend=None):
    """Sample ``vol[z, y, x]`` at fractional index coordinates.

    Points outside ``[0, n-1]`` on any axis receive ``fill``.
    """
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    zc, yc, xc = (np.ascontiguousarray(np.ravel(a), dtype=np.float64) for a in (zc, yc, xc))
    if _pick(backend) == "numba":
        return _trilinear_nb(vol, zc, yc, xc, float(fill))
    return _trilinear_np(vol, zc, yc, xc, float(fill))
