"""Numerical risk-bound evaluation for trained probabilistic networks.

Three bounds on the true randomized risk, all functions of the empirical
risk q, the posterior-prior divergence KL, the sample count n and the
confidence delta, with c = (KL + ln(2 sqrt(n)/delta)) / n:

  pbkl:   invert the binary KL: sup { p >= q : kl(q || p) <= c }
  quad:   ( sqrt(q + c/2) + sqrt(c/2) )^2     (relaxed inversion)
  lambda: q / (1 - lam/2) + c / (lam (1 - lam/2)),  lam in (0,2)

pbkl <= quad <= lambda(lam) for every lam, and quad equals lambda at its
minimizing lam. The empirical risk of the randomized predictor is itself
estimated with m Monte-Carlo weight draws, so a binomial-tail correction
at confidence delta_mc is applied first and the bounds are computed at
delta_bound, with delta_bound + delta_mc = delta.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import STREAM_CERT
from .network import forward
from .objectives import ln_term, optimal_lambda

ZERO_ONE = "zero_one"
RESCALED_XENT = "rescaled_xent"
LOSS_KINDS = (ZERO_ONE, RESCALED_XENT)

_BISECT_MAX_ITERS = 200
_BISECT_WIDTH = 1e-15


def binary_kl(q, p):
    """kl(q || p) between Bernoulli(q) and Bernoulli(p).

    Uses the convention 0 ln 0 = 0; returns +inf when p is 0 or 1 and q
    disagrees. Inputs outside [0,1] are a hard error.
    """
    q = float(q)
    p = float(p)
    if not 0.0 <= q <= 1.0 or not 0.0 <= p <= 1.0:
        raise ValueError("binary_kl needs probabilities, got q=%r p=%r" % (q, p))
    if p <= 0.0:
        return 0.0 if q == 0.0 else math.inf
    if p >= 1.0:
        return 0.0 if q == 1.0 else math.inf
    out = 0.0
    if q > 0.0:
        out += q * math.log(q / p)
    if q < 1.0:
        out += (1.0 - q) * math.log((1.0 - q) / (1.0 - p))
    return out


def kl_inverse(q_hat, c):
    """sup { p in [q_hat, 1] : kl(q_hat || p) <= c }, by bisection.

    kl(q, .) is increasing on [q, 1], so bisection brackets the crossing;
    the interval is shrunk to 1e-15 (about 51 halvings, comfortably under
    the 200-iteration cap) so the returned p reproduces c through
    binary_kl to near machine precision wherever the slope is moderate.
    Returns 1.0 outright when even p = 1 - 1e-12 satisfies the constraint.
    """
    q_hat = float(q_hat)
    c = float(c)
    if not 0.0 <= q_hat <= 1.0:
        raise ValueError("q_hat must lie in [0,1], got %r" % q_hat)
    if c < 0.0:
        raise ValueError("c must be nonnegative, got %r" % c)
    if c == 0.0:
        return q_hat
    if q_hat >= 1.0:
        return 1.0
    hi = 1.0 - 1e-12
    if hi <= q_hat or binary_kl(q_hat, hi) <= c:
        return 1.0
    lo = q_hat
    for _ in range(_BISECT_MAX_ITERS):
        if hi - lo <= _BISECT_WIDTH:
            break
        mid = 0.5 * (lo + hi)
        if binary_kl(q_hat, mid) <= c:
            lo = mid
        else:
            hi = mid
    if hi - lo > 1e-9:
        raise RuntimeError("kl_inverse bisection failed to converge: "
                           "width %.3e after %d iterations"
                           % (hi - lo, _BISECT_MAX_ITERS))
    return 0.5 * (lo + hi)


@dataclass
class BoundInputs:
    emp_risk: float
    kl_div: float
    n: int
    delta: float

    def __post_init__(self):
        if not 0.0 <= self.emp_risk <= 1.0:
            raise ValueError("emp_risk must lie in [0,1], got %r" % self.emp_risk)
        if self.kl_div < 0.0:
            raise ValueError("kl_div must be nonnegative, got %r" % self.kl_div)
        if self.n < 1:
            raise ValueError("n must be >= 1, got %r" % self.n)
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0,1), got %r" % self.delta)

    @property
    def complexity(self):
        return (self.kl_div + ln_term(self.n, self.delta)) / self.n


def pbkl_certificate(b):
    """Tightest bound: direct inversion of the binary KL statement."""
    return kl_inverse(b.emp_risk, b.complexity)


def quad_certificate(b):
    """Quadratic relaxation of the inversion, capped at 1."""
    half = 0.5 * b.complexity
    root = math.sqrt(b.emp_risk + half) + math.sqrt(half)
    return min(1.0, root * root)


def lambda_certificate(b, lam):
    """Straight-line relaxation at a given lam in (0,2), capped at 1."""
    if not 0.0 < lam < 2.0:
        raise ValueError("lambda must lie in (0,2), got %r" % lam)
    denom = 1.0 - lam / 2.0
    return min(1.0, b.emp_risk / denom + b.complexity / (lam * denom))


def mc_corrected_risk(zero_one_mean, m, delta_mc):
    """Binomial-tail upper confidence bound on the sampled empirical risk.

    With m i.i.d. weight draws, kl(mean || p) <= ln(2/delta_mc)/m holds
    with probability >= 1 - delta_mc; inverting gives the upper bound.
    Monotone decreasing in m.
    """
    if m < 1:
        raise ValueError("m must be >= 1, got %r" % m)
    if not 0.0 < delta_mc < 1.0:
        raise ValueError("delta_mc must lie in (0,1), got %r" % delta_mc)
    return kl_inverse(zero_one_mean, math.log(2.0 / delta_mc) / m)


@dataclass
class Certificate:
    loss_kind: str
    pbkl_bound: float
    quad_bound: float
    lambda_bound_at_optimum: float
    lambda_opt: float
    vacuous: bool             # tightest bound capped at 1
    mc_samples: int
    raw_mc_mean: float        # plain average over the m weight draws
    mc_corrected_emp: float   # after the binomial-tail correction
    kl_div: float
    n: int
    delta: float
    delta_bound: float
    delta_mc: float

    def as_dict(self):
        return dict(self.__dict__)


def _bounds_from(emp, kl_div, n, delta_bound):
    b = BoundInputs(emp, kl_div, n, delta_bound)
    lam = optimal_lambda(emp, kl_div, n, delta_bound)
    return (pbkl_certificate(b), quad_certificate(b),
            lambda_certificate(b, lam), lam)


def _split_delta(delta, delta_split):
    if delta_split is None:
        return 0.8 * delta, 0.2 * delta
    d_bound, d_mc = float(delta_split[0]), float(delta_split[1])
    if d_bound <= 0.0 or d_mc <= 0.0 or abs(d_bound + d_mc - delta) > 1e-12:
        raise ValueError("delta_split %r must be positive and sum to delta=%r"
                         % (delta_split, delta))
    return d_bound, d_mc


def mc_empirical_risks(net, data, m, rng, chunk=None):
    """Monte-Carlo estimates (zero-one mean, surrogate mean) of Q[L_hat].

    Draws m full weight samples from the dedicated stream; each sample is
    evaluated on the whole training split and samples are accumulated in
    index order so the result is independent of any parallel schedule.
    """
    if data.x.shape[0] == 0:
        raise ValueError("cannot certify on an empty dataset")
    if m < 1:
        raise ValueError("m must be >= 1, got %r" % m)
    inv_log = 1.0 / math.log(1.0 / net.p_min)
    sum01 = 0.0
    sum_sur = 0.0
    for _ in range(m):
        probs, _ = forward(net, data.x, rng=rng, mode="sampled")
        p_true = probs[np.arange(data.x.shape[0]), data.y]
        sur = np.where(p_true <= net.p_min, 1.0,
                       -np.log(np.maximum(p_true, net.p_min)) * inv_log)
        sum01 += float((np.argmax(probs, axis=1) != data.y).mean())
        sum_sur += float(sur.mean())
    return sum01 / m, sum_sur / m


def certify(net, data, loss_kind, m, delta, delta_split=None, rng=None):
    """Full certificate for one loss kind; see certify_both for both."""
    z, s = certify_both(net, data, m, delta, delta_split=delta_split, rng=rng)
    if loss_kind == ZERO_ONE:
        return z
    if loss_kind == RESCALED_XENT:
        return s
    raise ValueError("unknown loss kind %r" % loss_kind)


def certify_both(net, data, m, delta, delta_split=None, rng=None):
    """Certificates for the zero-one and rescaled surrogate losses.

    One MC pass serves both loss kinds (identical weight draws). The
    correction and bounds use the (delta_bound, delta_mc) split so the
    final statements hold jointly with probability >= 1 - delta.
    """
    if rng is None:
        raise ValueError("certify needs a dedicated RngStream")
    d_bound, d_mc = _split_delta(delta, delta_split)
    mean01, mean_sur = mc_empirical_risks(net, data, m, rng)
    kl_div = net.kl_total()
    n = data.x.shape[0]
    out = []
    for kind, mean in ((ZERO_ONE, mean01), (RESCALED_XENT, mean_sur)):
        emp = mc_corrected_risk(mean, m, d_mc)
        pbkl, quad, lam_b, lam = _bounds_from(emp, kl_div, n, d_bound)
        out.append(Certificate(
            loss_kind=kind, pbkl_bound=pbkl, quad_bound=quad,
            lambda_bound_at_optimum=lam_b, lambda_opt=lam,
            vacuous=pbkl >= 1.0, mc_samples=m, raw_mc_mean=mean,
            mc_corrected_emp=emp, kl_div=kl_div, n=n, delta=delta,
            delta_bound=d_bound, delta_mc=d_mc))
    return out[0], out[1]


def report_payload(cert_zero_one, cert_surrogate, seeds=None, config_hash=None,
                   dataset_fingerprint=None, metrics=None):
    """Assemble the JSON-serializable certificate report."""
    return {
        "report_version": 1,
        "bounds": {
            ZERO_ONE: cert_zero_one.as_dict(),
            RESCALED_XENT: cert_surrogate.as_dict(),
        },
        "seeds": seeds or {},
        "config_hash": config_hash,
        "dataset_fingerprint": dataset_fingerprint,
        "metrics": metrics or {},
    }


def write_report(path, payload):
    """Serialize the report deterministically (sorted keys, repr floats)."""
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_report(path):
    with open(path) as fh:
        return json.load(fh)
