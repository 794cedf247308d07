"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once from the ``HBOX2RBOX_NUMBA`` environment variable
(``0``/``false``/``off`` disables JIT) and can be switched at runtime with
:func:`set_backend`. Both paths return identical results up to floating-point
summation order; the test-suite runs every kernel under both.
"""
import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAS_NUMBA = numba is not None
_ENV_FLAG = os.environ.get("HBOX2RBOX_NUMBA", "1").strip().lower()
_USE_NUMBA = HAS_NUMBA and _ENV_FLAG not in ("0", "false", "off", "no")


def backend():
    return "numba" if _USE_NUMBA else "numpy"


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend name."""
    global _USE_NUMBA
    previous = backend()
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba is not importable")
        _USE_NUMBA = True
    elif name == "numpy":
        _USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")
    return previous


def _njit(fn):
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# Convex polygon clipping (Sutherland-Hodgman) and rotated IoU
# ---------------------------------------------------------------------------

def _clip_loop(subject, clipper):
    n_max = subject.shape[0] + clipper.shape[0] + 2
    cur = np.empty((n_max, 2))
    nxt = np.empty((n_max, 2))
    n = subject.shape[0]
    for i in range(n):
        cur[i, 0] = subject[i, 0]
        cur[i, 1] = subject[i, 1]
    m = clipper.shape[0]
    for e in range(m):
        if n == 0:
            break
        ax = clipper[e, 0]
        ay = clipper[e, 1]
        bx = clipper[(e + 1) % m, 0]
        by = clipper[(e + 1) % m, 1]
        ex = bx - ax
        ey = by - ay
        k = 0
        px = cur[n - 1, 0]
        py = cur[n - 1, 1]
        dp = ex * (py - ay) - ey * (px - ax)
        for i in range(n):
            qx = cur[i, 0]
            qy = cur[i, 1]
            dq = ex * (qy - ay) - ey * (qx - ax)
            if dq >= 0.0:
                if dp < 0.0:
                    t = dp / (dp - dq)
                    nxt[k, 0] = px + t * (qx - px)
                    nxt[k, 1] = py + t * (qy - py)
                    k += 1
                nxt[k, 0] = qx
                nxt[k, 1] = qy
                k += 1
            elif dp >= 0.0:
                t = dp / (dp - dq)
                nxt[k, 0] = px + t * (qx - px)
                nxt[k, 1] = py + t * (qy - py)
                k += 1
            px = qx
            py = qy
            dp = dq
        tmp = cur
        cur = nxt
        nxt = tmp
        n = k
    return cur[:n].copy()


def _shoelace(poly):
    n = poly.shape[0]
    s = 0.0
    for i in range(n):
        j = (i + 1) % n
        s += poly[i, 0] * poly[j, 1] - poly[j, 0] * poly[i, 1]
    return 0.5 * s


def _corners_loop(cx, cy, w, h, theta):
    c = math.cos(theta)
    s = math.sin(theta)
    out = np.empty((4, 2))
    us = (0.5 * w, 0.5 * w, -0.5 * w, -0.5 * w)
    vs = (-0.5 * h, 0.5 * h, 0.5 * h, -0.5 * h)
    for i in range(4):
        out[i, 0] = cx + us[i] * c - vs[i] * s
        out[i, 1] = cy + us[i] * s + vs[i] * c
    return out


def _iou_matrix_loop(boxes_a, boxes_b):
    na = boxes_a.shape[0]
    nb = boxes_b.shape[0]
    out = np.zeros((na, nb))
    for i in range(na):
        area_a = boxes_a[i, 2] * boxes_a[i, 3]
        ra = 0.5 * math.hypot(boxes_a[i, 2], boxes_a[i, 3])
        for j in range(nb):
            rb = 0.5 * math.hypot(boxes_b[j, 2], boxes_b[j, 3])
            dx = boxes_a[i, 0] - boxes_b[j, 0]
            dy = boxes_a[i, 1] - boxes_b[j, 1]
            if dx * dx + dy * dy > (ra + rb) * (ra + rb):
                continue
            # Clip about the midpoint of the two centres to keep coordinates small.
            pa = _corners_loop(0.5 * dx, 0.5 * dy, boxes_a[i, 2], boxes_a[i, 3], boxes_a[i, 4])
            pb = _corners_loop(-0.5 * dx, -0.5 * dy, boxes_b[j, 2], boxes_b[j, 3], boxes_b[j, 4])
            inter_poly = _clip_loop(pa, pb)
            inter = 0.0
            if inter_poly.shape[0] >= 3:
                inter = _shoelace(inter_poly)
                if inter < 1e-12:
                    inter = 0.0
            area_b = boxes_b[j, 2] * boxes_b[j, 3]
            inter = min(inter, area_a, area_b)  # rounding can overshoot for coincident boxes
            union = area_a + area_b - inter
            out[i, j] = inter / union
    return out


if HAS_NUMBA:
    _clip_nb = _njit(_clip_loop)
    _shoelace_nb = _njit(_shoelace)
    _corners_nb = _njit(_corners_loop)

    @_njit
    def _iou_matrix_nb(boxes_a, boxes_b):
        na = boxes_a.shape[0]
        nb = boxes_b.shape[0]
        out = np.zeros((na, nb))
        for i in range(na):
            area_a = boxes_a[i, 2] * boxes_a[i, 3]
            ra = 0.5 * math.hypot(boxes_a[i, 2], boxes_a[i, 3])
            for j in range(nb):
                rb = 0.5 * math.hypot(boxes_b[j, 2], boxes_b[j, 3])
                dx = boxes_a[i, 0] - boxes_b[j, 0]
                dy = boxes_a[i, 1] - boxes_b[j, 1]
                if dx * dx + dy * dy > (ra + rb) * (ra + rb):
                    continue
                # Clip about the midpoint of the two centres to keep coordinates small.
                pa = _corners_nb(0.5 * dx, 0.5 * dy, boxes_a[i, 2], boxes_a[i, 3], boxes_a[i, 4])
                pb = _corners_nb(-0.5 * dx, -0.5 * dy, boxes_b[j, 2], boxes_b[j, 3], boxes_b[j, 4])
                inter_poly = _clip_nb(pa, pb)
                inter = 0.0
                if inter_poly.shape[0] >= 3:
                    inter = _shoelace_nb(inter_poly)
                    if inter < 1e-12:
                        inter = 0.0
                area_b = boxes_b[j, 2] * boxes_b[j, 3]
                inter = min(inter, area_a, area_b)
                union = area_a + area_b - inter
                out[i, j] = inter / union
        return out


def _clip_numpy(subject, clipper):
    # Vectorised per clip edge: side tests and crossing points for a whole
    # ring at once; only the ring assembly is sequential.
    poly = np.asarray(subject, dtype=float)
    m = clipper.shape[0]
    for e in range(m):
        if len(poly) == 0:
            break
        a = clipper[e]
        edge = clipper[(e + 1) % m] - a
        d = edge[0] * (poly[:, 1] - a[1]) - edge[1] * (poly[:, 0] - a[0])
        prev = np.roll(poly, 1, axis=0)
        dprev = np.roll(d, 1)
        inside = d >= 0.0
        prev_inside = dprev >= 0.0
        cross = inside != prev_inside
        with np.errstate(divide="ignore", invalid="ignore"):
            t = dprev / (dprev - d)
            pts = prev + t[:, None] * (poly - prev)
        out = []
        for i in range(len(poly)):
            if cross[i]:
                out.append(pts[i])
            if inside[i]:
                out.append(poly[i])
        poly = np.array(out).reshape(-1, 2)
    return poly


def _iou_matrix_numpy(boxes_a, boxes_b):
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if len(boxes_a) == 0 or len(boxes_b) == 0:
        return out
    ra = 0.5 * np.hypot(boxes_a[:, 2], boxes_a[:, 3])
    rb = 0.5 * np.hypot(boxes_b[:, 2], boxes_b[:, 3])
    d2 = (boxes_a[:, None, 0] - boxes_b[None, :, 0]) ** 2 + (boxes_a[:, None, 1] - boxes_b[None, :, 1]) ** 2
    near = d2 <= (ra[:, None] + rb[None, :]) ** 2
    for i, j in zip(*np.nonzero(near)):
        hx = 0.5 * (boxes_a[i, 0] - boxes_b[j, 0])
        hy = 0.5 * (boxes_a[i, 1] - boxes_b[j, 1])
        pa = corners_array((hx, hy, *boxes_a[i, 2:]))
        pb = corners_array((-hx, -hy, *boxes_b[j, 2:]))
        inter_poly = _clip_numpy(pa, pb)
        inter = polygon_area_signed(inter_poly) if len(inter_poly) >= 3 else 0.0
        if inter < 1e-12:
            inter = 0.0
        area_a = boxes_a[i, 2] * boxes_a[i, 3]
        area_b = boxes_b[j, 2] * boxes_b[j, 3]
        inter = min(inter, area_a, area_b)
        union = area_a + area_b - inter
        out[i, j] = inter / union
    return out


def corners_array(box):
    cx, cy, w, h, theta = (float(v) for v in box)
    c, s = math.cos(theta), math.sin(theta)
    u = np.array([0.5, 0.5, -0.5, -0.5]) * w
    v = np.array([-0.5, 0.5, 0.5, -0.5]) * h
    return np.stack([cx + u * c - v * s, cy + u * s + v * c], axis=1)


def polygon_area_signed(poly):
    poly = np.asarray(poly, dtype=float)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_polygons(subject, clipper):
    subject = np.ascontiguousarray(subject, dtype=float).reshape(-1, 2)
    clipper = np.ascontiguousarray(clipper, dtype=float).reshape(-1, 2)
    if len(subject) == 0 or len(clipper) < 3:
        return np.zeros((0, 2))
    if _USE_NUMBA:
        return _clip_nb(subject, clipper)
    return _clip_numpy(subject, clipper)


def rotated_iou_matrix(boxes_a, boxes_b):
    """Pairwise rotated IoU for ``(N, 5)`` and ``(M, 5)`` arrays of (cx, cy, w, h, theta)."""
    a = np.ascontiguousarray(boxes_a, dtype=float).reshape(-1, 5)
    b = np.ascontiguousarray(boxes_b, dtype=float).reshape(-1, 5)
    if _USE_NUMBA:
        return _iou_matrix_nb(a, b)
    return _iou_matrix_numpy(a, b)


# ---------------------------------------------------------------------------
# Supersampled polygon coverage (even-odd rule)
# ---------------------------------------------------------------------------

def _coverage_loop(poly, x0, y0, nx, ny, ss):
    out = np.zeros((ny, nx))
    n = poly.shape[0]
    inv = 1.0 / ss
    norm = 1.0 / (ss * ss)
    for r in range(ny):
        for c in range(nx):
            hits = 0
            for sy in range(ss):
                py = y0 + r + (sy + 0.5) * inv
                for sx in range(ss):
                    px = x0 + c + (sx + 0.5) * inv
                    inside = False
                    j = n - 1
                    for i in range(n):
                        yi = poly[i, 1]
                        yj = poly[j, 1]
                        if (yi > py) != (yj > py):
                            xc = poly[i, 0] + (py - yi) * (poly[j, 0] - poly[i, 0]) / (yj - yi)
                            if px < xc:
                                inside = not inside
                        j = i
                    if inside:
                        hits += 1
            out[r, c] = hits * norm
    return out


if HAS_NUMBA:
    _coverage_nb = _njit(_coverage_loop)


def _coverage_numpy(poly, x0, y0, nx, ny, ss):
    offs = (np.arange(ss) + 0.5) / ss
    xs = (x0 + np.arange(nx)[:, None] + offs[None, :]).ravel()
    ys = (y0 + np.arange(ny)[:, None] + offs[None, :]).ravel()
    px, py = np.meshgrid(xs, ys)
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        xi, yi = poly[i]
        xj, yj = poly[i - 1]
        if yi == yj:
            continue
        straddle = (yi > py) != (yj > py)
        xc = xi + (py - yi) * (xj - xi) / (yj - yi)
        inside ^= straddle & (px < xc)
    cov = inside.reshape(ny, ss, nx, ss).mean(axis=(1, 3))
    return cov


def polygon_coverage(poly, x0, y0, nx, ny, supersample):
    """Fractional coverage of an ``(ny, nx)`` pixel window whose top-left pixel is (x0, y0).

    Pixel ``(r, c)`` spans ``[x0 + c, x0 + c + 1) x [y0 + r, y0 + r + 1)``;
    coverage is the fraction of ``supersample**2`` stratified sub-samples that
    fall inside the polygon.
    """
    poly = np.ascontiguousarray(poly, dtype=float).reshape(-1, 2)
    nx, ny, ss = int(nx), int(ny), int(supersample)
    if nx <= 0 or ny <= 0 or len(poly) < 3:
        return np.zeros((max(ny, 0), max(nx, 0)))
    if _USE_NUMBA:
        return _coverage_nb(poly, float(x0), float(y0), nx, ny, ss)
    return _coverage_numpy(poly, float(x0), float(y0), nx, ny, ss)


# ---------------------------------------------------------------------------
# Bilinear sampling with coordinate gradients
# ---------------------------------------------------------------------------

def _bilinear_loop(img, xs, ys):
    n = xs.shape[0]
    H = img.shape[0]
    W = img.shape[1]
    val = np.empty(n)
    gx = np.empty(n)
    gy = np.empty(n)
    for k in range(n):
        fx = xs[k] - 0.5
        fy = ys[k] - 0.5
        x0 = math.floor(fx)
        y0 = math.floor(fy)
        tx = fx - x0
        ty = fy - y0
        ix = int(x0)
        iy = int(y0)
        v00 = 0.0
        v01 = 0.0
        v10 = 0.0
        v11 = 0.0
        if 0 <= iy < H:
            if 0 <= ix < W:
                v00 = img[iy, ix]
            if 0 <= ix + 1 < W:
                v01 = img[iy, ix + 1]
        if 0 <= iy + 1 < H:
            if 0 <= ix < W:
                v10 = img[iy + 1, ix]
            if 0 <= ix + 1 < W:
                v11 = img[iy + 1, ix + 1]
        top = v00 + tx * (v01 - v00)
        bot = v10 + tx * (v11 - v10)
        val[k] = top + ty * (bot - top)
        gx[k] = (1.0 - ty) * (v01 - v00) + ty * (v11 - v10)
        gy[k] = bot - top
    return val, gx, gy


if HAS_NUMBA:
    _bilinear_nb = _njit(_bilinear_loop)


def _bilinear_numpy(img, xs, ys):
    H, W = img.shape
    padded = np.zeros((H + 2, W + 2))
    padded[1:-1, 1:-1] = img
    fx = xs - 0.5
    fy = ys - 0.5
    x0 = np.floor(fx)
    y0 = np.floor(fy)
    tx = fx - x0
    ty = fy - y0
    # Indices into the padded image; anything beyond the 1-px border reads 0.
    ix = np.clip(x0.astype(np.int64) + 1, 0, W + 1)
    iy = np.clip(y0.astype(np.int64) + 1, 0, H + 1)
    ix1 = np.clip(x0.astype(np.int64) + 2, 0, W + 1)
    iy1 = np.clip(y0.astype(np.int64) + 2, 0, H + 1)
    valid_x0 = (x0 >= 0) & (x0 < W)
    valid_x1 = (x0 + 1 >= 0) & (x0 + 1 < W)
    valid_y0 = (y0 >= 0) & (y0 < H)
    valid_y1 = (y0 + 1 >= 0) & (y0 + 1 < H)
    v00 = np.where(valid_y0 & valid_x0, padded[iy, ix], 0.0)
    v01 = np.where(valid_y0 & valid_x1, padded[iy, ix1], 0.0)
    v10 = np.where(valid_y1 & valid_x0, padded[iy1, ix], 0.0)
    v11 = np.where(valid_y1 & valid_x1, padded[iy1, ix1], 0.0)
    top = v00 + tx * (v01 - v00)
    bot = v10 + tx * (v11 - v10)
    val = top + ty * (bot - top)
    gx = (1.0 - ty) * (v01 - v00) + ty * (v11 - v10)
    gy = bot - top
    return val, gx, gy


def bilinear_sample(img, xs, ys):
    """Sample ``img`` at continuous points, returning values and d/dx, d/dy.

    Pixel ``(r, c)`` has its centre at ``(c + 0.5, r + 0.5)``; samples outside
    the image read zero.
    """
    img = np.ascontiguousarray(img, dtype=float)
    xs = np.asarray(xs, dtype=float)
    shape = xs.shape
    xs = np.ascontiguousarray(xs).ravel()
    ys = np.ascontiguousarray(ys, dtype=float).ravel()
    if _USE_NUMBA:
        val, gx, gy = _bilinear_nb(img, xs, ys)
    else:
        val, gx, gy = _bilinear_numpy(img, xs, ys)
    return val.reshape(shape), gx.reshape(shape), gy.reshape(shape)
