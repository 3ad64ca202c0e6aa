"""Hot numeric kernels.

Every kernel has a pure-numpy implementation (``*_np``) and, when numba is
available, an ``@njit`` twin (``*_nb``). The public name dispatches on
``FLATLORA_NUMBA``. Both paths implement the same arithmetic; integer
stages (the counter hash) agree bit-for-bit, transcendental stages may
differ in the last ulp between libm implementations.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_TWO = np.uint64(2)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53
_TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------- numpy path

def _mix_np(z):
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _bits_np(key, idx):
    return _mix_np(np.uint64(key) ^ _mix_np(idx))


def counter_normals_np(key, counter, count):
    idx = np.arange(count, dtype=np.uint64) + np.uint64(counter)
    u1 = ((_bits_np(key, _TWO * idx) >> _S11).astype(np.float64) + 0.5) * _INV53
    u2 = ((_bits_np(key, _TWO * idx + _ONE) >> _S11).astype(np.float64) + 0.5) * _INV53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)


def counter_uniforms_np(key, counter, count):
    idx = np.arange(count, dtype=np.uint64) + np.uint64(counter)
    return ((_bits_np(key, idx) >> _S11).astype(np.float64) + 0.5) * _INV53


def scaled_row_normals_np(key, counter, scales, n):
    m = scales.shape[0]
    out = counter_normals_np(key, counter, m * n).reshape(m, n)
    out *= scales[:, None]
    out[scales == 0.0] = 0.0
    return out


def row_norms_np(w):
    return np.sqrt(np.einsum("ij,ij->i", w, w))


def layernorm_fwd_np(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def layernorm_bwd_np(gxhat, xhat, rstd):
    # gradient of xhat = (x - mean) * rstd w.r.t. x, row-wise
    n = xhat.shape[1]
    a = gxhat.sum(axis=1, keepdims=True)
    b = (gxhat * xhat).sum(axis=1, keepdims=True)
    return (rstd[:, None] / n) * (n * gxhat - a - xhat * b)


# ---------------------------------------------------------------- numba path

@njit(cache=True, inline="always")
def _mix_nb(z):
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _normal_at_nb(key, i):
    two = np.uint64(2)
    b1 = _mix_nb(key ^ _mix_nb(two * i))
    b2 = _mix_nb(key ^ _mix_nb(two * i + np.uint64(1)))
    u1 = (np.float64(b1 >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16
    u2 = (np.float64(b2 >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(6.283185307179586 * u2)


@njit(cache=True)
def counter_normals_nb(key, counter, count):
    out = np.empty(count, dtype=np.float64)
    for i in range(count):
        out[i] = _normal_at_nb(key, counter + np.uint64(i))
    return out


@njit(cache=True)
def counter_uniforms_nb(key, counter, count):
    out = np.empty(count, dtype=np.float64)
    for i in range(count):
        b = _mix_nb(key ^ _mix_nb(counter + np.uint64(i)))
        out[i] = (np.float64(b >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16
    return out


@njit(cache=True)
def scaled_row_normals_nb(key, counter, scales, n):
    m = scales.shape[0]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        s = scales[i]
        if s == 0.0:
            continue
        base = counter + np.uint64(i * n)
        for j in range(n):
            out[i, j] = s * _normal_at_nb(key, base + np.uint64(j))
    return out


@njit(cache=True)
def row_norms_nb(w):
    m, n = w.shape
    out = np.empty(m, dtype=np.float64)
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc += w[i, j] * w[i, j]
        out[i] = np.sqrt(acc)
    return out


@njit(cache=True)
def layernorm_fwd_nb(x, eps):
    rows, n = x.shape
    xhat = np.empty_like(x)
    rstd = np.empty(rows, dtype=np.float64)
    for i in range(rows):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        var /= n
        r = 1.0 / np.sqrt(var + eps)
        rstd[i] = r
        for j in range(n):
            xhat[i, j] = (x[i, j] - mu) * r
    return xhat, rstd


@njit(cache=True)
def layernorm_bwd_nb(gxhat, xhat, rstd):
    rows, n = xhat.shape
    out = np.empty_like(xhat)
    for i in range(rows):
        a = 0.0
        b = 0.0
        for j in range(n):
            a += gxhat[i, j]
            b += gxhat[i, j] * xhat[i, j]
        c = rstd[i] / n
        for j in range(n):
            out[i, j] = c * (n * gxhat[i, j] - a - xhat[i, j] * b)
    return out


# ---------------------------------------------------------------- dispatch

def counter_normals(key, counter, count):
    """``count`` standard normals; draw ``i`` depends only on (key, counter + i)."""
    if count == 0:
        return np.zeros(0)
    if USE_NUMBA:
        return counter_normals_nb(np.uint64(key), np.uint64(counter), int(count))
    return counter_normals_np(key, counter, count)


def counter_uniforms(key, counter, count):
    if count == 0:
        return np.zeros(0)
    if USE_NUMBA:
        return counter_uniforms_nb(np.uint64(key), np.uint64(counter), int(count))
    return counter_uniforms_np(key, counter, count)


def scaled_row_normals(key, counter, scales, n):
    """(m, n) matrix with row ``i`` = ``scales[i]`` times consecutive normals."""
    scales = np.ascontiguousarray(scales, dtype=np.float64)
    if USE_NUMBA:
        return scaled_row_normals_nb(np.uint64(key), np.uint64(counter), scales, int(n))
    return scaled_row_normals_np(key, counter, scales, n)


def row_norms(w):
    w = np.ascontiguousarray(w, dtype=np.float64)
    if USE_NUMBA:
        return row_norms_nb(w)
    return row_norms_np(w)


def layernorm_fwd(x, eps):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if USE_NUMBA:
        return layernorm_fwd_nb(x, eps)
    return layernorm_fwd_np(x, eps)


def layernorm_bwd(gxhat, xhat, rstd):
    gxhat = np.ascontiguousarray(gxhat, dtype=np.float64)
    if USE_NUMBA:
        return layernorm_bwd_nb(gxhat, xhat, rstd)
    return layernorm_bwd_np(gxhat, xhat, rstd)
