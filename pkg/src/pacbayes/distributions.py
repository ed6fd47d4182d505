"""Factorized Gaussian and Laplace distributions over weight coordinates.

A posterior is a :class:`CoordDistribution` (per-coordinate location mu and
pre-scale rho, with scale = softplus(rho) so that unconstrained gradient
steps keep the scale positive). The frozen prior it is certified against is
a :class:`PriorSnapshot`. Sampling is reparameterized: a weight is a
deterministic transform of parameter-free noise, and the raw noise is
returned so gradients can flow back to (mu, rho).

Closed-form KL divergences between two factorized Gaussians / Laplaces:

  Gaussian (v = variance):  0.5 * ( ln(v0/v1) + (mu1-mu0)^2/v0 + v1/v0 - 1 )
  Laplace  (b = scale):     ln(b0/b1) + |mu1-mu0|/b0
                            + (b1/b0) * exp(-|mu1-mu0|/b1) - 1

Subscript 1 is the posterior, 0 the prior; the total KL of the product
measures is the coordinate-wise sum.
"""

from dataclasses import dataclass

import numpy as np

from .core import sample_std_normal, sample_uniform_sym, sigmoid, softplus

GAUSSIAN = "gaussian"
LAPLACE = "laplace"
FAMILIES = (GAUSSIAN, LAPLACE)


@dataclass
class CoordDistribution:
    """Learnable factorized distribution: family + (mu, rho) arrays."""

    family: str
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError("unknown family %r" % self.family)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.mu.shape != self.rho.shape:
            raise ValueError("mu shape %s != rho shape %s"
                             % (self.mu.shape, self.rho.shape))

    @property
    def scale(self):
        return softplus(self.rho)

    @property
    def size(self):
        return self.mu.size


@dataclass
class PriorSnapshot:
    """Frozen copy of (mu, scale) taken at initialization; never updated."""

    family: str
    mu: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError("unknown family %r" % self.family)
        self.mu = np.array(self.mu, dtype=np.float64, copy=True)
        self.scale = np.array(self.scale, dtype=np.float64, copy=True)
        if self.mu.shape != self.scale.shape:
            raise ValueError("mu shape %s != scale shape %s"
                             % (self.mu.shape, self.scale.shape))
        if np.any(self.scale <= 0.0):
            raise ValueError("prior scale must be positive")
        self.mu.flags.writeable = False
        self.scale.flags.writeable = False


def noise_to_basis(family, noise):
    """Per-coordinate d(weight)/d(scale) as a function of the raw noise.

    Gaussian: w = mu + scale*eps, so the basis is eps itself.
    Laplace:  w = mu - scale*sign(u)*ln(1-2|u|) with u ~ Uniform(-1/2,1/2),
              so the basis is -sign(u)*ln(1-2|u|) (log1p form for accuracy).
    """
    if family == GAUSSIAN:
        return noise
    return -np.sign(noise) * np.log1p(-2.0 * np.abs(noise))


def sample(dist, rng, noise=None):
    """Draw one weight per coordinate; returns (weights, raw_noise).

    Passing explicit noise replays (or forces, e.g. zeros) the transform
    without consuming the stream.
    """
    if noise is None:
        if dist.family == GAUSSIAN:
            noise = sample_std_normal(rng, dist.size).reshape(dist.mu.shape)
        else:
            noise = sample_uniform_sym(rng, dist.size).reshape(dist.mu.shape)
    else:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != dist.mu.shape:
            raise ValueError("noise shape %s != parameter shape %s"
                             % (noise.shape, dist.mu.shape))
    w = dist.mu + dist.scale * noise_to_basis(dist.family, noise)
    return w, noise


def kl_gaussian(mu1, var1, mu0, var0):
    """KL between two Gaussians given means and variances (elementwise)."""
    var1 = np.asarray(var1, dtype=np.float64)
    var0 = np.asarray(var0, dtype=np.float64)
    if np.any(var1 <= 0.0) or np.any(var0 <= 0.0):
        raise ValueError("variances must be positive")
    d = np.asarray(mu1, dtype=np.float64) - mu0
    out = 0.5 * (np.log(var0 / var1) + d * d / var0 + var1 / var0 - 1.0)
    return out if out.ndim else float(out)


def kl_laplace(mu1, b1, mu0, b0):
    """KL between two Laplace distributions given means and scales."""
    b1 = np.asarray(b1, dtype=np.float64)
    b0 = np.asarray(b0, dtype=np.float64)
    if np.any(b1 <= 0.0) or np.any(b0 <= 0.0):
        raise ValueError("scales must be positive")
    ad = np.abs(np.asarray(mu1, dtype=np.float64) - mu0)
    out = np.log(b0 / b1) + ad / b0 + (b1 / b0) * np.exp(-ad / b1) - 1.0
    return out if out.ndim else float(out)


def kl_total(posterior, prior):
    """Sum of coordinate-wise KL terms (KL of the product measures)."""
    if posterior.family != prior.family:
        raise ValueError("family mismatch: %s vs %s"
                         % (posterior.family, prior.family))
    if posterior.mu.shape != prior.mu.shape:
        raise ValueError("shape mismatch: %s vs %s"
                         % (posterior.mu.shape, prior.mu.shape))
    s1 = posterior.scale
    if posterior.family == GAUSSIAN:
        per = kl_gaussian(posterior.mu, s1 * s1, prior.mu,
                          prior.scale * prior.scale)
    else:
        per = kl_laplace(posterior.mu, s1, prior.mu, prior.scale)
    return float(np.sum(per))


def kl_gradients(posterior, prior):
    """Exact partials of kl_total w.r.t. the posterior's mu and rho.

    The rho gradient chains through scale = softplus(rho). For the Laplace
    family the |mu1-mu0| term is non-differentiable at zero; the
    subgradient 0 is used there (np.sign(0) = 0 gives it for free).
    """
    if posterior.family != prior.family:
        raise ValueError("family mismatch: %s vs %s"
                         % (posterior.family, prior.family))
    s1 = posterior.scale
    if posterior.family == GAUSSIAN:
        v0 = prior.scale * prior.scale
        dmu = (posterior.mu - prior.mu) / v0
        dscale = -1.0 / s1 + s1 / v0
    else:
        d = posterior.mu - prior.mu
        ad = np.abs(d)
        decay = np.exp(-ad / s1)
        dmu = np.sign(d) / prior.scale * (1.0 - decay)
        dscale = -1.0 / s1 + decay / prior.scale * (1.0 + ad / s1)
    return dmu, dscale * sigmoid(posterior.rho)
