"""Array primitives with explicit forward and backward passes.

Everything here is a pure function of its inputs: forward passes return
fresh arrays (plus a cache of whatever the backward pass needs), and
backward passes return gradients without mutating anything. Convolutions
are written as one GEMM per kernel tap so the arithmetic stays inside
BLAS; the stride-1 max pools use a numba sliding-window kernel with a
plain numpy fallback.

Layout conventions:
  2-D tensors (GAN path):  (batch, height, width, channels), kernels
      (kh, kw, c_in, c_out).
  1-D tensors (CNN path):  channel-major (channels, batch, length),
      kernels (k, c_out, c_in).
"""

import ctypes
import ctypes.util

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _tune_allocator():  # pragma: no cover - platform dependent
    """Keep large numpy buffers on the heap instead of mmap/munmap churn.

    glibc serves allocations above ~128 KB straight from mmap and unmaps
    them on free, so every conv scratch buffer pays page-fault costs again
    on the next step; raising the thresholds roughly doubles large-tensor
    throughput here. No-op on non-glibc platforms.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
        m_trim_threshold, m_mmap_threshold = -1, -3
        one_gib = 1 << 30
        libc.mallopt(m_mmap_threshold, one_gib)
        libc.mallopt(m_trim_threshold, one_gib)
    except (OSError, AttributeError, TypeError):
        pass


_tune_allocator()


# ---------------------------------------------------------------------------
# elementwise activations
# ---------------------------------------------------------------------------

def leaky_relu(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(x, dy, slope=0.2):
    return np.where(x > 0, dy, slope * dy)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, dy):
    return np.where(x > 0, dy, 0)


def tanh_backward(y, dy):
    # y is the forward output tanh(x)
    return dy * (1.0 - y * y)


def sigmoid(x):
    """Numerically stable logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(np.zeros((), dtype=np.asarray(x).dtype), x)


def logsumexp(x, axis=-1, keepdims=False):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def softmax(x, axis=-1):
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    return x - logsumexp(x, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def dense(x, w, b):
    return x @ w + b


def dense_backward(x, w, dy):
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# 2-D convolution, stride >= 1, "same" coverage (output = ceil(in/stride))
# ---------------------------------------------------------------------------

def same_out_size(size, stride):
    return -(-size // stride)  # ceil division


def _same_pads(size, k, stride):
    out = same_out_size(size, stride)
    total = max((out - 1) * stride + k - size, 0)
    beg = total // 2
    return beg, total - beg, out


def conv2d(x, w, b, stride=1):
    """x (B,H,W,Cin), w (kh,kw,Cin,Cout) -> y (B,H',W',Cout), cache.

    Strided convs either gather an im2col matrix (small kernel footprints)
    or run one GEMM per kernel tap; stride-1 convs with a small
    kernel-times-output-width footprint take the single-GEMM tap-plane
    path instead (see _conv2d_flat).
    """
    cin = x.shape[3]
    kh, kw, _, cout = w.shape
    if stride == 1 and kh * kw * cout <= 512:
        return _conv2d_flat(x, w, b)
    if kh * kw * cin <= 64:
        return _conv2d_im2col(x, w, b, stride)
    bsz, h, wd, cin = x.shape
    kh, kw, cin_w, cout = w.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, kernel {cin_w}")
    ph0, ph1, out_h = _same_pads(h, kh, stride)
    pw0, pw1, out_w = _same_pads(wd, kw, stride)
    xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    y2 = np.zeros((bsz * out_h * out_w, cout), dtype=x.dtype)
    for dh in range(kh):
        for dw in range(kw):
            patch = xp[:, dh:dh + out_h * stride:stride,
                       dw:dw + out_w * stride:stride, :]
            y2 += np.ascontiguousarray(patch).reshape(-1, cin) @ w[dh, dw]
    y = y2.reshape(bsz, out_h, out_w, cout) + b
    cache = ("strided", xp, x.shape, stride, (ph0, pw0))
    return y, cache


def conv2d_backward(w, cache, dy):
    if cache[0] == "flat":
        return _conv2d_flat_backward(w, cache, dy)
    if cache[0] == "im2col":
        return _conv2d_im2col_backward(w, cache, dy)
    _, xp, x_shape, stride, (ph0, pw0) = cache
    bsz, h, wd, cin = x_shape
    kh, kw, _, cout = w.shape
    out_h, out_w = dy.shape[1], dy.shape[2]
    dy2 = dy.reshape(-1, cout)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for dh in range(kh):
        for dj in range(kw):
            patch = xp[:, dh:dh + out_h * stride:stride,
                       dj:dj + out_w * stride:stride, :]
            flat = np.ascontiguousarray(patch).reshape(-1, cin)
            dw[dh, dj] = flat.T @ dy2
            dpatch = (dy2 @ w[dh, dj].T).reshape(bsz, out_h, out_w, cin)
            dxp[:, dh:dh + out_h * stride:stride,
                dj:dj + out_w * stride:stride, :] += dpatch
    db = dy2.sum(axis=0)
    dx = dxp[:, ph0:ph0 + h, pw0:pw0 + wd, :]
    return np.ascontiguousarray(dx), dw, db


def _conv2d_im2col(x, w, b, stride):
    """Patch-matrix path for kernels with a small kh*kw*cin footprint."""
    bsz, h, wd, cin = x.shape
    kh, kw, cin_w, cout = w.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, kernel {cin_w}")
    ph0, ph1, out_h = _same_pads(h, kh, stride)
    pw0, pw1, out_w = _same_pads(wd, kw, stride)
    xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    cols = np.empty((bsz, out_h, out_w, kh * kw * cin), dtype=x.dtype)
    tap = 0
    for dh in range(kh):
        for dw in range(kw):
            cols[..., tap * cin:(tap + 1) * cin] = \
                xp[:, dh:dh + out_h * stride:stride,
                   dw:dw + out_w * stride:stride, :]
            tap += 1
    cols2 = cols.reshape(-1, kh * kw * cin)
    w2 = w.reshape(kh * kw * cin, cout)
    y = (cols2 @ w2).reshape(bsz, out_h, out_w, cout) + b
    cache = ("im2col", cols2, x.shape, xp.shape, stride, (ph0, pw0))
    return y, cache


def _conv2d_im2col_backward(w, cache, dy):
    _, cols2, x_shape, xp_shape, stride, (ph0, pw0) = cache
    bsz, h, wd, cin = x_shape
    kh, kw, _, cout = w.shape
    out_h, out_w = dy.shape[1], dy.shape[2]
    dy2 = dy.reshape(-1, cout)
    w2 = w.reshape(kh * kw * cin, cout)
    dw = (cols2.T @ dy2).reshape(w.shape)
    dcols = (dy2 @ w2.T).reshape(bsz, out_h, out_w, kh * kw * cin)
    dxp = np.zeros(xp_shape, dtype=dy.dtype)
    tap = 0
    for dh in range(kh):
        for dj in range(kw):
            dxp[:, dh:dh + out_h * stride:stride,
                dj:dj + out_w * stride:stride, :] += \
                dcols[..., tap * cin:(tap + 1) * cin]
            tap += 1
    db = dy2.sum(axis=0)
    dx = dxp[:, ph0:ph0 + h, pw0:pw0 + wd, :]
    return np.ascontiguousarray(dx), dw, db


def _conv2d_flat(x, w, b):
    """Stride-1 conv with outputs and taps laid out over one contracted GEMM.

    The padded input is projected once through all (tap, out-channel) kernel
    columns (a single GEMM with the input read exactly once), after which
    each tap contributes a shifted plane that is gathered into the output.
    Memory scales with kh*kw*cout, so this path is for small kernels/widths;
    both our stride-1 uses (generator output conv, miniatures) qualify.
    """
    bsz, h, wd, cin = x.shape
    kh, kw, cin_w, cout = w.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, kernel {cin_w}")
    ph0, ph1, _ = _same_pads(h, kh, 1)
    pw0, pw1, _ = _same_pads(wd, kw, 1)
    xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    hp, wp = xp.shape[1], xp.shape[2]
    x2 = xp.reshape(-1, cin)
    wt = np.ascontiguousarray(w.transpose(2, 0, 1, 3)).reshape(cin, kh * kw * cout)
    u = (x2 @ wt).reshape(bsz, hp, wp, kh * kw, cout)
    y = np.zeros((bsz, h, wd, cout), dtype=x.dtype)
    tap = 0
    for dh in range(kh):
        for dw in range(kw):
            y += u[:, dh:dh + h, dw:dw + wd, tap, :]
            tap += 1
    y += b
    cache = ("flat", x2, x.shape, (hp, wp), (ph0, pw0))
    return y, cache


def _conv2d_flat_backward(w, cache, dy):
    _, x2, x_shape, (hp, wp), (ph0, pw0) = cache
    bsz, h, wd, cin = x_shape
    kh, kw, _, cout = w.shape
    du = np.zeros((bsz, hp, wp, kh * kw, cout), dtype=dy.dtype)
    tap = 0
    for dh in range(kh):
        for dj in range(kw):
            du[:, dh:dh + h, dj:dj + wd, tap, :] = dy
            tap += 1
    du2 = du.reshape(-1, kh * kw * cout)
    wt = np.ascontiguousarray(w.transpose(2, 0, 1, 3)).reshape(cin, kh * kw * cout)
    dx2 = du2 @ wt.T
    dwt = x2.T @ du2
    dw = np.ascontiguousarray(
        dwt.reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3))
    db = dy.sum(axis=(0, 1, 2))
    dxp = dx2.reshape(bsz, hp, wp, cin)
    dx = dxp[:, ph0:ph0 + h, pw0:pw0 + wd, :]
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# 2-D transposed convolution, output = input * stride (requires k >= stride)
# ---------------------------------------------------------------------------

def conv_transpose2d(x, w, b, stride=2):
    """x (B,H,W,Cin), w (kh,kw,Cin,Cout) -> y (B,H*s,W*s,Cout), cache.

    One GEMM projects the input through all (tap, out-channel) kernel
    columns at once; each tap's plane is then scattered to its strided
    output positions.
    """
    bsz, h, wd, cin = x.shape
    kh, kw, cin_w, cout = w.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, kernel {cin_w}")
    if kh < stride or kw < stride:
        raise ValueError("kernel must be at least the stride")
    full_h = (h - 1) * stride + kh
    full_w = (wd - 1) * stride + kw
    x2 = np.ascontiguousarray(x).reshape(-1, cin)
    wt = np.ascontiguousarray(w.transpose(2, 0, 1, 3)).reshape(cin, kh * kw * cout)
    u = (x2 @ wt).reshape(bsz, h, wd, kh * kw, cout)
    yf = np.zeros((bsz, full_h, full_w, cout), dtype=x.dtype)
    tap = 0
    for dh in range(kh):
        for dw in range(kw):
            yf[:, dh:dh + h * stride:stride,
               dw:dw + wd * stride:stride, :] += u[:, :, :, tap, :]
            tap += 1
    ch0 = (kh - stride) // 2
    cw0 = (kw - stride) // 2
    y = yf[:, ch0:ch0 + h * stride, cw0:cw0 + wd * stride, :] + b
    cache = (x2, x.shape, (full_h, full_w), stride, (ch0, cw0))
    return np.ascontiguousarray(y), cache


def conv_transpose2d_backward(w, cache, dy):
    x2, x_shape, (full_h, full_w), stride, (ch0, cw0) = cache
    bsz, h, wd, cin = x_shape
    kh, kw, _, cout = w.shape
    dyf = np.zeros((bsz, full_h, full_w, cout), dtype=dy.dtype)
    dyf[:, ch0:ch0 + dy.shape[1], cw0:cw0 + dy.shape[2], :] = dy
    du = np.empty((bsz, h, wd, kh * kw, cout), dtype=dy.dtype)
    tap = 0
    for dh in range(kh):
        for dj in range(kw):
            du[:, :, :, tap, :] = dyf[:, dh:dh + h * stride:stride,
                                      dj:dj + wd * stride:stride, :]
            tap += 1
    du2 = du.reshape(-1, kh * kw * cout)
    wt = np.ascontiguousarray(w.transpose(2, 0, 1, 3)).reshape(cin, kh * kw * cout)
    dx2 = du2 @ wt.T
    dwt = x2.T @ du2
    dw = np.ascontiguousarray(
        dwt.reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3))
    db = dy.reshape(-1, cout).sum(axis=0)
    return dx2.reshape(x_shape), dw, db


# ---------------------------------------------------------------------------
# 1-D convolution, stride 1, valid coverage (CNN path, channels-first)
# ---------------------------------------------------------------------------

def conv1d(x, w, b):
    """x (Cin,B,L), w (k,Cout,Cin) -> y (Cout,B,L-k+1), cache.

    Channel-major layout: the (B, L) plane flattens to one axis and the k
    shifted copies of the input stack into an im2col matrix, so the whole
    convolution is one GEMM with contraction width k*Cin. Columns that
    would mix adjacent batch rows are garbage and get cropped; gradients
    are zero-padded so the garbage never contributes.
    """
    cin, bsz, length = x.shape
    k, cout, cin_w = w.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, kernel {cin_w}")
    out_len = length - k + 1
    if out_len < 1:
        raise ValueError(f"input length {length} shorter than kernel {k}")
    x2 = np.ascontiguousarray(x).reshape(cin, bsz * length)
    m = x2.shape[1]
    cols = np.zeros((k * cin, m), dtype=x.dtype)
    for d in range(k):
        cols[d * cin:(d + 1) * cin, :m - d] = x2[:, d:]
    wflat = np.ascontiguousarray(w.transpose(1, 0, 2)).reshape(cout, k * cin)
    y = (wflat @ cols).reshape(cout, bsz, length)[:, :, :out_len]
    del cols  # rebuilt per tap in backward; not worth holding k*Cin*M floats
    y = np.ascontiguousarray(y)
    y += b[:, None, None]
    return y, (x2, (cin, bsz, length), k)


def conv1d_backward(w, cache, dy, need_dx=True):
    x2, (cin, bsz, length), k = cache
    cout, _, out_len = dy.shape
    m = bsz * length
    dyf = np.zeros((cout, bsz, length), dtype=dy.dtype)
    dyf[:, :, :out_len] = dy
    dy2 = dyf.reshape(cout, m)
    dw = np.empty_like(w)
    dx2 = np.zeros((cin, m), dtype=dy.dtype) if need_dx else None
    for d in range(k):
        dw[d] = dy2[:, :m - d] @ x2[:, d:].T
        if need_dx:
            dx2[:, d:] += w[d].T @ dy2[:, :m - d]
    db = dy.sum(axis=(1, 2))
    if not need_dx:
        return None, dw, db
    return dx2.reshape(cin, bsz, length), dw, db


# ---------------------------------------------------------------------------
# 1-D max pooling, stride 1, valid coverage
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _maxpool_rows_small(x, k, y, arg):  # pragma: no cover - compiled
        # direct k-wide scan; beats the deque for small windows
        rows, length = x.shape
        out_len = length - k + 1
        for r in range(rows):
            for i in range(out_len):
                best = x[r, i]
                bi = i
                for d in range(1, k):
                    v = x[r, i + d]
                    if v > best:
                        best = v
                        bi = i + d
                y[r, i] = best
                arg[r, i] = bi

    @njit(cache=True)
    def _maxpool_rows(x, k, y, arg):  # pragma: no cover - compiled
        # monotone-deque sliding max, O(L) per row independent of k
        rows, length = x.shape
        q = np.empty(length, np.int64)
        for r in range(rows):
            head = 0
            tail = 0
            for j in range(length):
                v = x[r, j]
                while tail > head and x[r, q[tail - 1]] < v:
                    tail -= 1
                q[tail] = j
                tail += 1
                if q[head] <= j - k:
                    head += 1
                if j >= k - 1:
                    a = q[head]
                    y[r, j - k + 1] = x[r, a]
                    arg[r, j - k + 1] = a

    @njit(cache=True)
    def _maxpool_rows_backward(dy, arg, dx):  # pragma: no cover - compiled
        rows, out_len = dy.shape
        for r in range(rows):
            for i in range(out_len):
                dx[r, arg[r, i]] += dy[r, i]


def _maxpool_rows_numpy(x, k):
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)
    am = np.argmax(win, axis=2)  # first max, matching the numba kernel
    out_len = x.shape[1] - k + 1
    arg = (am + np.arange(out_len)[None, :]).astype(np.int32)
    y = np.take_along_axis(x, arg, axis=1)
    return y, arg


def maxpool1d(x, k):
    """x (..., L) -> (y (..., L-k+1), argmax indices along L as int32).

    Stride-1 sliding max along the last axis; ties resolve to the leftmost
    maximum in each window.
    """
    *lead, length = x.shape
    out_len = length - k + 1
    if out_len < 1:
        raise ValueError(f"input length {length} shorter than pool {k}")
    n_rows = int(np.prod(lead)) if lead else 1
    rows = np.ascontiguousarray(x).reshape(n_rows, length)
    if _HAVE_NUMBA:
        y = np.empty((n_rows, out_len), dtype=x.dtype)
        arg = np.empty((n_rows, out_len), dtype=np.int32)
        if k <= 8:
            _maxpool_rows_small(rows, k, y, arg)
        else:
            _maxpool_rows(rows, k, y, arg)
    else:
        y, arg = _maxpool_rows_numpy(rows, k)
    return y.reshape(*lead, out_len), arg.reshape(*lead, out_len)


def maxpool1d_backward(arg, length, dy):
    *lead, out_len = dy.shape
    n_rows = int(np.prod(lead)) if lead else 1
    dx = np.zeros((n_rows, length), dtype=dy.dtype)
    dy2 = np.ascontiguousarray(dy).reshape(n_rows, out_len)
    arg2 = arg.reshape(n_rows, out_len)
    if _HAVE_NUMBA:
        _maxpool_rows_backward(dy2, arg2, dx)
    else:
        rows = np.repeat(np.arange(n_rows), out_len)
        np.add.at(dx, (rows, arg2.ravel()), dy2.ravel())
    return dx.reshape(*lead, length)


# ---------------------------------------------------------------------------
# fused optimizer updates (single pass per array instead of ~7 temporaries)
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _adam_kernel(p, g, m, v, out_p, out_m, out_v, lr, b1, b2, eps, c1, c2):  # pragma: no cover
        for i in range(p.size):
            mi = b1 * m[i] + (1.0 - b1) * g[i]
            vi = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
            out_m[i] = mi
            out_v[i] = vi
            out_p[i] = p[i] - lr * (mi / c1) / (np.sqrt(vi / c2) + eps)

    @njit(cache=True)
    def _rmsprop_kernel(p, g, v, out_p, out_v, lr, rho, eps):  # pragma: no cover
        for i in range(p.size):
            vi = rho * v[i] + (1.0 - rho) * g[i] * g[i]
            out_v[i] = vi
            out_p[i] = p[i] - lr * g[i] / (np.sqrt(vi) + eps)


def adam_update(p, g, m, v, lr, beta1, beta2, epsilon, c1, c2):
    """Bias-corrected Adam on one array; returns (new p, new m, new v)."""
    if _HAVE_NUMBA:
        out_p = np.empty_like(p)
        out_m = np.empty_like(m)
        out_v = np.empty_like(v)
        _adam_kernel(p.ravel(), g.ravel(), m.ravel(), v.ravel(),
                     out_p.ravel(), out_m.ravel(), out_v.ravel(),
                     lr, beta1, beta2, epsilon, c1, c2)
        return out_p, out_m, out_v
    new_m = beta1 * m + (1.0 - beta1) * g
    new_v = beta2 * v + (1.0 - beta2) * g * g
    step = lr * (new_m / c1) / (np.sqrt(new_v / c2) + epsilon)
    return (p - step).astype(p.dtype, copy=False), \
        new_m.astype(m.dtype, copy=False), new_v.astype(v.dtype, copy=False)


def rmsprop_update(p, g, v, lr, rho, epsilon):
    """RMSprop on one array; returns (new p, new v)."""
    if _HAVE_NUMBA:
        out_p = np.empty_like(p)
        out_v = np.empty_like(v)
        _rmsprop_kernel(p.ravel(), g.ravel(), v.ravel(),
                        out_p.ravel(), out_v.ravel(), lr, rho, epsilon)
        return out_p, out_v
    new_v = rho * v + (1.0 - rho) * g * g
    step = lr * g / (np.sqrt(new_v) + epsilon)
    return (p - step).astype(p.dtype, copy=False), new_v.astype(v.dtype, copy=False)


# ---------------------------------------------------------------------------
# finite differences (test oracle, kept here so every module shares one)
# ---------------------------------------------------------------------------

def numerical_gradient(f, x, eps=1e-4):
    """Central finite differences of scalar-valued f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
        it.iternext()
    return grad


def relative_error(a, b, floor=1e-8):
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
