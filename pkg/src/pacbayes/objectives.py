"""Bounded surrogate loss and the bound-derived training objectives.

The cross-entropy is made bounded by flooring the true-class probability at
p_min and rescaling by 1/ln(1/p_min), which maps it onto [0,1] as the bound
theorems require; the same rescaled loss feeds both training and the
surrogate-loss certificates. When the floor is active the loss is locally
constant, so its gradient is exactly zero.

Objectives, all functions of (empirical surrogate risk L, total KL):

  quad:   ( sqrt(L + (KL + ln(2 sqrt(n)/delta)) / (2n))
            + sqrt((KL + ln(2 sqrt(n)/delta)) / (2n)) )^2
  lambda: L / (1 - lam/2) + (KL + ln(2 sqrt(n)/delta)) / (n lam (1 - lam/2)),
          lam in (0,2), minimized by alternating steps on lam and the weights
  bbb:    L + eta * KL / n
  erm:    L

The lambda objective minimized over lam equals the quad objective; the
closed-form minimizer is exposed as optimal_lambda.
"""

import math
from dataclasses import dataclass

import numpy as np

QUAD = "quad"
LAMBDA = "lambda"
BBB = "bbb"
ERM = "erm"
KINDS = (QUAD, LAMBDA, BBB, ERM)


@dataclass
class LossValue:
    surrogate: float      # rescaled clamped cross-entropy, in [0,1]
    zero_one: int         # 1 iff argmax(probs) != label (ties: lowest index)
    dscores: np.ndarray   # gradient of `surrogate` w.r.t. the class scores


@dataclass
class ObjectiveConfig:
    kind: str
    n: int
    delta: float
    eta: float = None             # bbb only
    current_lambda: float = None  # lambda only; updated by the trainer

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError("unknown objective kind %r" % self.kind)
        if self.n < 1:
            raise ValueError("n must be >= 1, got %r" % self.n)
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0,1), got %r" % self.delta)
        if self.kind == BBB:
            if self.eta is None or self.eta <= 0.0:
                raise ValueError("bbb needs eta > 0, got %r" % self.eta)
        if self.kind == LAMBDA and self.current_lambda is None:
            self.current_lambda = 1.0


def _check_lambda(lam):
    if not 0.0 < lam < 2.0:
        raise ValueError("lambda must lie in (0,2), got %r" % lam)


def ln_term(n, delta):
    """The confidence term ln(2 sqrt(n) / delta) shared by all bounds."""
    return math.log(2.0 * math.sqrt(n) / delta)


def bounded_xent(probs, label, p_min):
    """Rescaled clamped cross-entropy of one example; see module docstring."""
    probs = np.asarray(probs, dtype=np.float64)
    label = int(label)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError("label %d out of range for %d classes"
                         % (label, probs.shape[-1]))
    if not 0.0 < p_min < 1.0:
        raise ValueError("p_min must lie in (0,1), got %r" % p_min)
    inv_log = 1.0 / math.log(1.0 / p_min)
    p = probs[label]
    zero_one = int(int(np.argmax(probs)) != label)
    if p <= p_min:
        return LossValue(1.0, zero_one, np.zeros_like(probs))
    dscores = probs * inv_log
    dscores[label] -= inv_log
    return LossValue(-math.log(p) * inv_log, zero_one, dscores)


def batch_bounded_xent(probs, labels, p_min):
    """Vectorized batch-mean loss; returns (surrogate, error, dscores).

    dscores is the gradient of the *mean* surrogate w.r.t. the score
    matrix, i.e. already carries the 1/batch factor; rows whose true-class
    probability sits at or below the floor contribute zero gradient.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    b = probs.shape[0]
    inv_log = 1.0 / math.log(1.0 / p_min)
    rows = np.arange(b)
    p_true = probs[rows, labels]
    clamped = p_true <= p_min
    surrogate = np.where(clamped, 1.0, -np.log(np.maximum(p_true, p_min)) * inv_log)
    errors = (np.argmax(probs, axis=1) != labels).astype(np.float64)
    dscores = probs * (inv_log / b)
    dscores[rows, labels] -= inv_log / b
    dscores[clamped] = 0.0
    return float(surrogate.mean()), float(errors.mean()), dscores


def objective_value(cfg, emp_surrogate, kl):
    """Evaluate the configured training objective at (L, KL)."""
    if cfg.kind == QUAD:
        b2 = (kl + ln_term(cfg.n, cfg.delta)) / (2.0 * cfg.n)
        root = math.sqrt(emp_surrogate + b2) + math.sqrt(b2)
        return root * root
    if cfg.kind == LAMBDA:
        lam = cfg.current_lambda
        _check_lambda(lam)
        c = kl + ln_term(cfg.n, cfg.delta)
        return emp_surrogate / (1.0 - lam / 2.0) + c / (cfg.n * lam * (1.0 - lam / 2.0))
    if cfg.kind == BBB:
        return emp_surrogate + cfg.eta * kl / cfg.n
    return emp_surrogate


def objective_coefficients(cfg, emp_surrogate, kl):
    """Exact partials (d obj/d L, d obj/d KL) used to mix gradient blocks."""
    if cfg.kind == QUAD:
        b2 = (kl + ln_term(cfg.n, cfg.delta)) / (2.0 * cfg.n)
        s_risk = math.sqrt(emp_surrogate + b2)
        s_kl = math.sqrt(b2)
        c_risk = 1.0 + s_kl / s_risk
        c_kl = (s_risk + s_kl) * (1.0 / s_risk + 1.0 / s_kl) / (2.0 * cfg.n)
        return c_risk, c_kl
    if cfg.kind == LAMBDA:
        lam = cfg.current_lambda
        _check_lambda(lam)
        denom = 1.0 - lam / 2.0
        return 1.0 / denom, 1.0 / (cfg.n * lam * denom)
    if cfg.kind == BBB:
        return 1.0, cfg.eta / cfg.n
    return 1.0, 0.0


def lambda_gradient(emp_surrogate, kl, n, delta, lam):
    """Analytic d(lambda objective)/d lambda at fixed (L, KL)."""
    _check_lambda(lam)
    c = kl + ln_term(n, delta)
    half = 1.0 - lam / 2.0
    return (emp_surrogate / (2.0 * half * half)
            - (c / n) * (1.0 - lam) / (lam * half) ** 2)


def optimal_lambda(emp_surrogate, kl, n, delta):
    """Closed-form minimizer of the lambda objective; always in (0, 1].

    Solves L lam^2 / 2 + B lam - B = 0 for B = (KL + ln(2 sqrt(n)/delta))/n,
    written as 2B / (sqrt(B^2 + 2 B L) + B) which is stable as L -> 0.
    """
    b = (kl + ln_term(n, delta)) / n
    return 2.0 * b / (math.sqrt(b * b + 2.0 * b * emp_surrogate) + b)
