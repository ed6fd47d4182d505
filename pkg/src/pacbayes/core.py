"""Dense float64 linear algebra helpers and reproducible random streams.

Everything downstream (weight sampling, training, certificate Monte Carlo)
draws randomness through :class:`RngStream`, a thin wrapper around numpy's
counter-based Philox generator keyed by ``(seed, stream_id)``. Distinct
stream ids give statistically independent streams, so one master seed can
be split into dedicated streams for weight initialization, per-step noise,
minibatch shuffling and certificate sampling without any shared state.
"""

import numpy as np

_M64 = (1 << 64) - 1

# conventional stream ids; anything derived from these is fine too
STREAM_INIT = 1
STREAM_TRAIN_NOISE = 2
STREAM_SHUFFLE = 3
STREAM_CERT = 4
STREAM_EVAL = 5


def mix64(z):
    """splitmix64 finalizer; used to derive child stream ids and run seeds."""
    z = (z + 0x9E3779B97F4A7C15) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return (z ^ (z >> 31)) & _M64


class RngStream:
    """One logical random stream: Philox keyed by (seed, stream_id).

    The same (seed, stream_id) always reproduces the same sequence. A
    stream is owned by exactly one task; use :meth:`derived` to split off
    independent children instead of sharing.
    """

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed) & _M64
        self.stream_id = int(stream_id) & _M64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def derived(self, k):
        """Independent child stream #k of this stream (same seed)."""
        child = mix64(self.stream_id ^ mix64(int(k) & _M64))
        return RngStream(self.seed, child)

    def uniform(self, n):
        """n doubles uniform on [0, 1)."""
        return self.gen.random(int(n))

    def permutation(self, n):
        return self.gen.permutation(int(n))


def sample_std_normal(rng, n):
    """n i.i.d. standard normal draws via the Box-Muller transform.

    Each pair of uniforms (u1, u2) maps to r*cos(2 pi u2), r*sin(2 pi u2)
    with r = sqrt(-2 ln u1); u1 is taken as 1 - uniform so it lies in
    (0, 1] and the log never sees zero.
    """
    n = int(n)
    if n < 1:
        raise ValueError("need n >= 1, got %d" % n)
    m = (n + 1) // 2
    u1 = 1.0 - rng.uniform(m)
    u2 = rng.uniform(m)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = (2.0 * np.pi) * u2
    out = np.empty(2 * m)
    np.multiply(r, np.cos(theta), out=out[:m])
    np.multiply(r, np.sin(theta), out=out[m:])
    return out[:n]


def sample_uniform_sym(rng, n):
    """n i.i.d. draws from Uniform(-1/2, 1/2), both endpoints excluded.

    rng.uniform gives [0, 1); exact zeros (probability 2^-53 per draw) are
    redrawn so the lower endpoint -1/2 never appears.
    """
    n = int(n)
    if n < 1:
        raise ValueError("need n >= 1, got %d" % n)
    u = rng.uniform(n)
    while True:
        bad = u == 0.0
        if not bad.any():
            break
        u[bad] = rng.uniform(int(bad.sum()))
    return u - 0.5


def softplus(x):
    """ln(1 + e^x), overflow-safe: for x > 30 the identity x is returned."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))
    return out if out.ndim else float(out)


def softplus_inv(y):
    """Inverse of softplus: ln(e^y - 1) for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0.0):
        raise ValueError("softplus_inv needs positive input")
    out = np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))
    return out if out.ndim else float(out)


def sigmoid(x):
    """Numerically stable logistic function (= d softplus / dx)."""
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    ex = np.exp(np.where(pos, -x, x))
    out = np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return out if out.ndim else float(out)


def matmul(a, b):
    """Matrix product with explicit shape validation and finite output.

    Raises ValueError naming both shapes on an inner-dimension mismatch;
    raises FloatingPointError if the product contains non-finite entries.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul needs 2-D operands, got %s and %s"
                         % (a.shape, b.shape))
    if a.shape[1] != b.shape[0]:
        raise ValueError("matmul shape mismatch: %s x %s" % (a.shape, b.shape))
    out = a @ b
    if not np.isfinite(out).all():
        raise FloatingPointError("matmul produced non-finite entries")
    return out
