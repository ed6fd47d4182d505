"""SGD-with-momentum training of bound-derived objectives, plus grid sweeps.

One step = one fresh weight draw applied to the whole minibatch, batch-mean
surrogate loss and its hand-derived gradients, the exact (full-sum) KL and
its analytic gradients, mixed by the objective's two partial derivatives:

    g_total = c_risk * g_loss + c_kl * g_kl
    v <- momentum * v - lr * g_total ;  theta <- theta + v

For the lambda objective one lambda gradient step (clipped into
[1e-4, 2 - 1e-4]) follows every parameter step, starting from lambda = 1.
Every run derives all of its random streams (init, per-step noise,
shuffling, certification, evaluation) from a single seed, so identical
configs reproduce bit-identical logs and certificates.
"""

import itertools
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import certificates, distributions, objectives
from .core import (RngStream, mix64, sample_std_normal, sample_uniform_sym,
                   STREAM_CERT, STREAM_EVAL, STREAM_INIT, STREAM_SHUFFLE,
                   STREAM_TRAIN_NOISE)
from .distributions import kl_gradients, noise_to_basis
from .network import backward, forward, init_network, softmax
from .objectives import (ObjectiveConfig, batch_bounded_xent, lambda_gradient,
                         objective_coefficients, objective_value)

LAMBDA_MIN = 1e-4
LAMBDA_MAX = 2.0 - 1e-4


class TrainingDiverged(RuntimeError):
    """Objective became non-finite; the run is failed, not the process."""


@dataclass
class TrainConfig:
    """A training configuration; grid axes are tuples (singletons for train)."""

    objective: str
    family: str = distributions.GAUSSIAN
    hidden: tuple = (64, 32)
    prior_scale: tuple = (0.05,)
    learning_rate: tuple = (5e-3,)
    momentum: tuple = (0.95,)
    p_min: tuple = (1e-4,)
    eta: tuple = (1e-3,)
    batch_size: int = 256
    iterations: int = 5000
    lambda_lr: float = 1e-4
    seed: int = 1
    delta: float = 0.05
    mc_samples: int = 1000
    delta_split: tuple = None
    eval_samples: int = 1
    log_every: int = 100

    def __post_init__(self):
        if self.objective not in objectives.KINDS:
            raise ValueError("unknown objective %r" % self.objective)
        for name in ("prior_scale", "learning_rate", "momentum", "p_min", "eta"):
            axis = getattr(self, name)
            if not isinstance(axis, tuple):
                axis = tuple(axis) if np.iterable(axis) else (axis,)
                setattr(self, name, axis)
            if len(axis) == 0:
                raise ValueError("grid %s must be nonempty" % name)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def grid_axes(self):
        """Sweep axes in fixed order; eta only participates for bbb."""
        axes = [self.prior_scale, self.learning_rate, self.momentum, self.p_min]
        axes.append(self.eta if self.objective == objectives.BBB else (None,))
        return axes

    def points(self):
        """Cartesian product of the grids as resolved RunPoints."""
        for idx, (ps, lr, mom, pm, eta) in enumerate(
                itertools.product(*self.grid_axes())):
            yield RunPoint(index=idx, prior_scale=ps, learning_rate=lr,
                           momentum=mom, p_min=pm, eta=eta,
                           seed=point_seed(self.seed, idx))

    def is_single(self):
        return all(len(ax) == 1 for ax in self.grid_axes())

    def single_point(self):
        if not self.is_single():
            raise ValueError("config has multi-valued grids; use sweep()")
        return next(self.points())


def point_seed(master_seed, index):
    """Per-grid-point seed, a pure function of (master seed, point index)."""
    return mix64(mix64(master_seed) ^ (index + 1))


@dataclass
class RunPoint:
    index: int
    prior_scale: float
    learning_rate: float
    momentum: float
    p_min: float
    eta: float
    seed: int

    def hypers(self):
        return {"prior_scale": self.prior_scale,
                "learning_rate": self.learning_rate,
                "momentum": self.momentum, "p_min": self.p_min,
                "eta": self.eta}


@dataclass
class LogRecord:
    iteration: int
    objective: float
    surrogate: float
    kl_over_n: float
    lam: float        # None for objectives without lambda
    seconds: float

    CSV_HEADER = "iteration,objective,surrogate,kl_over_n,lambda,seconds"

    def csv_row(self):
        lam = "" if self.lam is None else repr(self.lam)
        return "%d,%r,%r,%r,%s,%.3f" % (self.iteration, self.objective,
                                        self.surrogate, self.kl_over_n,
                                        lam, self.seconds)


@dataclass
class TrainResult:
    net: object
    records: list
    cert_zero_one: object
    cert_surrogate: object
    test_error: float      # None when no test split was given
    point: RunPoint
    final_lambda: float


class _Momentum:
    def __init__(self, params):
        self.velocity = [np.zeros_like(p) for p in params]


_GRAD_KEYS = ("w_mu", "w_rho", "b_mu", "b_rho")


def sgd_step(net, batch_x, batch_y, objcfg, opt, lr, momentum, rng):
    """One parameter update; returns the pre-update batch statistics."""
    if batch_x.shape[0] == 0:
        raise ValueError("empty minibatch")
    probs, trace = forward(net, batch_x, rng=rng, mode="sampled")
    surrogate, error, dscores = batch_bounded_xent(probs, batch_y, net.p_min)
    kl = net.kl_total()
    c_risk, c_kl = objective_coefficients(objcfg, surrogate, kl)
    loss_grads = backward(net, trace, dscores)
    params = net.param_arrays()
    vi = 0
    for li, layer in enumerate(net.layers):
        kw = kl_gradients(layer.weights, layer.prior_weights)
        kb = kl_gradients(layer.biases, layer.prior_biases)
        kl_block = {"w_mu": kw[0], "w_rho": kw[1], "b_mu": kb[0], "b_rho": kb[1]}
        for key in _GRAD_KEYS:
            g = c_risk * loss_grads[li][key]
            if c_kl != 0.0:
                g = g + c_kl * kl_block[key]
            if not np.isfinite(g).all():
                raise FloatingPointError(
                    "non-finite gradient in layer %d block %s" % (li, key))
            v = opt.velocity[vi]
            v *= momentum
            v -= lr * g
            params[vi] += v
            vi += 1
    return {"objective": objective_value(objcfg, surrogate, kl),
            "surrogate": surrogate, "error": error, "kl": kl}


def lambda_step(objcfg, emp_surrogate, kl, lambda_lr=1e-4):
    """One clipped gradient step on lambda; returns the new value."""
    grad = lambda_gradient(emp_surrogate, kl, objcfg.n, objcfg.delta,
                           objcfg.current_lambda)
    objcfg.current_lambda = min(LAMBDA_MAX,
                                max(LAMBDA_MIN,
                                    objcfg.current_lambda - lambda_lr * grad))
    return objcfg.current_lambda


def _batch_stats(net, batch_x, batch_y, objcfg, rng):
    """Forward-only statistics (used for the final log record)."""
    probs, _ = forward(net, batch_x, rng=rng, mode="sampled")
    surrogate, error, _ = batch_bounded_xent(probs, batch_y, net.p_min)
    kl = net.kl_total()
    return {"objective": objective_value(objcfg, surrogate, kl),
            "surrogate": surrogate, "error": error, "kl": kl}


class _BatchStream:
    """Epoch-wise reshuffled minibatch slices over n rows."""

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.bs = min(batch_size, n)
        self.rng = rng
        self._new_epoch()

    def _new_epoch(self):
        self.perm = self.rng.permutation(self.n)
        self.pos = 0

    def next(self):
        if self.pos >= self.n:
            self._new_epoch()
        idx = self.perm[self.pos:self.pos + self.bs]
        self.pos += self.bs
        return idx


def steps_per_epoch(n, batch_size):
    return math.ceil(n / min(batch_size, n))


def train(cfg, train_data, test_data=None, point=None, log_path=None):
    """Full training loop -> TrainResult with certificates attached.

    cfg must be a single-point config unless `point` resolves the grids.
    The log records pre-update statistics every cfg.log_every steps
    (iteration 0 therefore has KL exactly 0) plus one final post-training
    record; with log_path they are also appended to disk incrementally.
    Raises TrainingDiverged if the objective becomes non-finite.
    """
    if point is None:
        point = cfg.single_point()
    n = train_data.n
    arch = [train_data.dim] + list(cfg.hidden) + [train_data.num_classes]
    root = RngStream(point.seed)
    net = init_network(arch, point.prior_scale, root.derived(STREAM_INIT),
                       family=cfg.family, p_min=point.p_min)
    objcfg = ObjectiveConfig(cfg.objective, n=n, delta=cfg.delta,
                             eta=point.eta,
                             current_lambda=1.0 if cfg.objective == objectives.LAMBDA else None)
    noise_rng = root.derived(STREAM_TRAIN_NOISE)
    batches = _BatchStream(n, cfg.batch_size, root.derived(STREAM_SHUFFLE))
    opt = _Momentum(net.param_arrays())
    records = []
    sink = open(log_path, "a") if log_path else None
    if sink and sink.tell() == 0:
        sink.write(LogRecord.CSV_HEADER + "\n")
        sink.flush()
    t0 = time.time()

    def log(iteration, stats):
        rec = LogRecord(iteration, stats["objective"], stats["surrogate"],
                        stats["kl"] / n, objcfg.current_lambda,
                        time.time() - t0)
        records.append(rec)
        if sink:
            sink.write(rec.csv_row() + "\n")
            sink.flush()

    try:
        for step in range(cfg.iterations):
            idx = batches.next()
            stats = sgd_step(net, train_data.x[idx], train_data.y[idx], objcfg,
                             opt, point.learning_rate, point.momentum, noise_rng)
            if not math.isfinite(stats["objective"]):
                raise TrainingDiverged("objective non-finite at step %d" % step)
            if step % cfg.log_every == 0:
                log(step, stats)
            if cfg.objective == objectives.LAMBDA:
                lambda_step(objcfg, stats["surrogate"], stats["kl"], cfg.lambda_lr)
        idx = batches.next()
        log(cfg.iterations,
            _batch_stats(net, train_data.x[idx], train_data.y[idx], objcfg,
                         noise_rng))
    finally:
        if sink:
            sink.close()

    cert01, cert_sur = certificates.certify_both(
        net, train_data, cfg.mc_samples, cfg.delta,
        delta_split=cfg.delta_split, rng=root.derived(STREAM_CERT))
    test_error = None
    if test_data is not None:
        mode = "mean" if cfg.objective == objectives.ERM else "sampled"
        test_error = eval_risk(net, test_data, mode=mode,
                               samples=cfg.eval_samples,
                               rng=root.derived(STREAM_EVAL))
    return TrainResult(net, records, cert01, cert_sur, test_error, point,
                       objcfg.current_lambda)


def eval_risk(net, data, mode="sampled", samples=1, rng=None, chunk=None):
    """Zero-one error rate of the (randomized) predictor on a split.

    mode "sampled": every example gets `samples` fresh full weight draws;
    its class-probability vectors are averaged and the argmax compared to
    the label. mode "mean": one deterministic pass through the posterior
    locations. Draws are consumed in (chunk, sample, layer) order, so the
    result is a pure function of the stream state.
    """
    if data.n == 0:
        raise ValueError("empty dataset")
    if mode == "mean":
        probs, _ = forward(net, data.x, mode="mean")
        return float((np.argmax(probs, axis=1) != data.y).mean())
    if mode != "sampled":
        raise ValueError("unknown mode %r" % mode)
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if rng is None:
        raise ValueError("sampled evaluation needs an RngStream")
    coords = sum(l.weights.size + l.biases.size for l in net.layers)
    if chunk is None:
        chunk = max(1, min(data.n, int(4_000_000 / max(coords, 1)) or 1))
    wrong = 0
    for start in range(0, data.n, chunk):
        xb = data.x[start:start + chunk]
        yb = data.y[start:start + chunk]
        e = xb.shape[0]
        acc = np.zeros((e, data.num_classes))
        for _ in range(samples):
            a = xb
            for i, layer in enumerate(net.layers):
                fam = layer.weights.family
                nw = (sample_std_normal(rng, e * layer.weights.size)
                      if fam == distributions.GAUSSIAN
                      else sample_uniform_sym(rng, e * layer.weights.size))
                nb = (sample_std_normal(rng, e * layer.biases.size)
                      if fam == distributions.GAUSSIAN
                      else sample_uniform_sym(rng, e * layer.biases.size))
                w = (layer.weights.mu
                     + layer.weights.scale
                     * noise_to_basis(fam, nw.reshape(e, layer.out_dim,
                                                      layer.in_dim)))
                bvec = (layer.biases.mu
                        + layer.biases.scale
                        * noise_to_basis(fam, nb.reshape(e, layer.out_dim)))
                z = np.einsum("eoi,ei->eo", w, a) + bvec
                a = np.maximum(z, 0.0) if i < len(net.layers) - 1 else z
            acc += softmax(a)
        wrong += int((np.argmax(acc, axis=1) != yb).sum())
    return wrong / data.n


# --- sweep ------------------------------------------------------------

_WORKER = {}


def _sweep_init(cfg, train_data, test_data, out_dir, manifest_ctx):
    _WORKER["args"] = (cfg, train_data, test_data, out_dir, manifest_ctx)


def _sweep_run(point):
    return _run_point(*_WORKER["args"], point)


def _run_point(cfg, train_data, test_data, out_dir, manifest_ctx, point):
    log_path = None
    point_dir = None
    if out_dir is not None:
        import os
        point_dir = os.path.join(out_dir, "point_%04d" % point.index)
        os.makedirs(point_dir, exist_ok=True)
        log_path = os.path.join(point_dir, "runlog.csv")
        if os.path.exists(log_path):
            os.unlink(log_path)
    try:
        res = train(cfg, train_data, test_data, point=point, log_path=log_path)
    except (TrainingDiverged, FloatingPointError) as exc:
        return {"index": point.index, "seed": point.seed, "status": "failed",
                "reason": str(exc), **point.hypers()}
    if point_dir is not None:
        from .artifacts import write_run_artifacts
        write_run_artifacts(point_dir, res, cfg, manifest_ctx)
    row = {"index": point.index, "seed": point.seed, "status": "ok",
           "reason": "", **point.hypers()}
    c = res.cert_zero_one
    row.update(cert_pbkl=c.pbkl_bound, cert_quad=c.quad_bound,
               cert_lambda=c.lambda_bound_at_optimum,
               mc_corrected_emp=c.mc_corrected_emp, kl=c.kl_div,
               cert_pbkl_surrogate=res.cert_surrogate.pbkl_bound,
               test_error=res.test_error,
               final_surrogate=res.records[-1].surrogate)
    return row


def sweep(cfg, train_data, test_data=None, jobs=1, out_dir=None,
          manifest_ctx=None):
    """Train every grid point; returns rows ordered by grid index.

    Each point gets its own derived seed, so the output is identical for
    any jobs count. Diverged points are recorded as failed; if every point
    fails the sweep itself is an error. Rows carry all hyperparameters and
    final metrics; the best row minimizes the zero-one kl-inversion bound.
    With out_dir, each point also writes full run artifacts under
    out_dir/point_NNNN/.
    """
    points = list(cfg.points())
    if jobs > 1:
        import concurrent.futures as cf
        import multiprocessing as mp
        ctx = mp.get_context("fork")
        with cf.ProcessPoolExecutor(max_workers=jobs, mp_context=ctx,
                                    initializer=_sweep_init,
                                    initargs=(cfg, train_data, test_data,
                                              out_dir, manifest_ctx)) as ex:
            rows = list(ex.map(_sweep_run, points))
    else:
        rows = [_run_point(cfg, train_data, test_data, out_dir, manifest_ctx, p)
                for p in points]
    rows.sort(key=lambda r: r["index"])
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        raise RuntimeError("all %d sweep points failed" % len(rows))
    best = min(ok, key=lambda r: (r["cert_pbkl"], r["index"]))
    return rows, best["index"]
