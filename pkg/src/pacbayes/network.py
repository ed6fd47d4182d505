"""Probabilistic multilayer perceptron with hand-derived backpropagation.

Layers hold factorized distributions over weights and biases plus frozen
prior snapshots taken at initialization. A forward pass draws one fresh
weight sample (shared across the rows of a batch), applies ReLU hidden
activations and a max-subtracted softmax, and records everything needed to
run the backward pass without resampling. Gradients w.r.t. every (mu, rho)
come from the pathwise identity w = mu + scale * basis(noise):

    dL/dmu  = dL/dw
    dL/drho = dL/dw * basis(noise) * sigmoid(rho)

where basis(noise) is eps for the Gaussian family and
-sign(u) ln(1 - 2|u|) for the Laplace family.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import distributions as dist
from .core import matmul, sample_std_normal, sigmoid, softplus_inv

CHECKPOINT_VERSION = 1


@dataclass
class ProbLayer:
    in_dim: int
    out_dim: int
    weights: dist.CoordDistribution      # shape (out_dim, in_dim)
    biases: dist.CoordDistribution       # shape (out_dim,)
    prior_weights: dist.PriorSnapshot
    prior_biases: dist.PriorSnapshot

    def __post_init__(self):
        if self.weights.mu.shape != (self.out_dim, self.in_dim):
            raise ValueError("weight shape %s inconsistent with dims (%d, %d)"
                             % (self.weights.mu.shape, self.out_dim, self.in_dim))
        if self.biases.mu.shape != (self.out_dim,):
            raise ValueError("bias shape %s inconsistent with out_dim %d"
                             % (self.biases.mu.shape, self.out_dim))

    def kl(self):
        return (dist.kl_total(self.weights, self.prior_weights)
                + dist.kl_total(self.biases, self.prior_biases))


class ProbNetwork:
    """Stack of probabilistic affine layers; ReLU hidden, softmax output."""

    def __init__(self, layers, p_min=1e-4):
        if not layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError("layer dims do not chain: %d -> %d"
                                 % (a.out_dim, b.in_dim))
        if not 0.0 < p_min < 1.0:
            raise ValueError("p_min must lie in (0,1), got %r" % p_min)
        self.layers = list(layers)
        self.p_min = float(p_min)

    @property
    def family(self):
        return self.layers[0].weights.family

    @property
    def arch(self):
        return [self.layers[0].in_dim] + [l.out_dim for l in self.layers]

    def kl_total(self):
        """Exact KL between posterior and prior, summed over all layers."""
        return float(sum(l.kl() for l in self.layers))

    def param_arrays(self):
        """Mutable views on all trainable arrays, in a fixed order."""
        out = []
        for l in self.layers:
            out.extend([l.weights.mu, l.weights.rho, l.biases.mu, l.biases.rho])
        return out


@dataclass
class ForwardTrace:
    """Everything needed to rerun backprop for one (batch) forward pass."""

    net: ProbNetwork
    inputs: list          # per layer: activations fed in, shape (B, in_dim)
    preacts: list         # per layer: affine outputs, shape (B, out_dim)
    weights: list         # per layer: (W, b) actually used
    noises: list          # per layer: (noise_W, noise_b) raw noise arrays


def _truncated_std_normal(rng, n, bound=2.0):
    """Standard normals conditioned on |x| <= bound, by redrawing rejects."""
    x = sample_std_normal(rng, n)
    while True:
        bad = np.abs(x) > bound
        k = int(bad.sum())
        if k == 0:
            return x
        x[bad] = sample_std_normal(rng, k)


def init_network(arch, prior_scale, rng, family=dist.GAUSSIAN, p_min=1e-4):
    """Build a network whose posterior starts exactly at its prior.

    Weight locations are drawn from a truncated Gaussian with std
    1/sqrt(in_dim), truncated at +/- 2 std; bias locations start at zero.
    The prior snapshot copies those locations with the global prior_scale,
    and rho is set so softplus(rho) = prior_scale, hence KL = 0 at init.
    """
    arch = [int(d) for d in arch]
    if len(arch) < 2:
        raise ValueError("arch needs at least input and output dims, got %r"
                         % (arch,))
    if any(d < 1 for d in arch):
        raise ValueError("arch dims must be positive, got %r" % (arch,))
    if prior_scale <= 0.0:
        raise ValueError("prior_scale must be positive, got %r" % prior_scale)
    rho0 = softplus_inv(float(prior_scale))
    layers = []
    for n_in, n_out in zip(arch, arch[1:]):
        std = 1.0 / np.sqrt(n_in)
        w_mu = std * _truncated_std_normal(rng, n_out * n_in).reshape(n_out, n_in)
        b_mu = np.zeros(n_out)
        w = dist.CoordDistribution(family, w_mu, np.full((n_out, n_in), rho0))
        b = dist.CoordDistribution(family, b_mu, np.full(n_out, rho0))
        pw = dist.PriorSnapshot(family, w_mu, np.full((n_out, n_in),
                                                      float(prior_scale)))
        pb = dist.PriorSnapshot(family, b_mu, np.full(n_out, float(prior_scale)))
        layers.append(ProbLayer(n_in, n_out, w, b, pw, pb))
    return ProbNetwork(layers, p_min=p_min)


def softmax(scores):
    """Row-wise softmax with max subtraction for stability."""
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(net, x, rng=None, mode="sampled", forced_noise=None):
    """Run the network on x; returns (probs, trace).

    mode "sampled" draws one fresh weight set per call (requires rng unless
    forced_noise, a per-layer list of (noise_W, noise_b), is given); mode
    "mean" uses the posterior locations, i.e. zero noise. x may be a single
    vector or a (batch, features) matrix; probs matches that leading shape.
    Output clamping is not applied here - it belongs to the loss.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.ndim != 2 or a.shape[1] != net.layers[0].in_dim:
        raise ValueError("input shape %s does not match first layer in_dim %d"
                         % (x.shape, net.layers[0].in_dim))
    if mode not in ("sampled", "mean"):
        raise ValueError("unknown mode %r" % mode)
    if mode == "sampled" and rng is None and forced_noise is None:
        raise ValueError("sampled mode needs an rng or forced noise")

    inputs, preacts, weights, noises = [], [], [], []
    for i, layer in enumerate(net.layers):
        if mode == "mean":
            nw = np.zeros_like(layer.weights.mu)
            nb = np.zeros_like(layer.biases.mu)
        elif forced_noise is not None:
            nw, nb = forced_noise[i]
        else:
            nw = nb = None
        W, nw = dist.sample(layer.weights, rng, noise=nw)
        b, nb = dist.sample(layer.biases, rng, noise=nb)
        inputs.append(a)
        z = matmul(a, W.T) + b
        preacts.append(z)
        weights.append((W, b))
        noises.append((nw, nb))
        if i < len(net.layers) - 1:
            a = np.maximum(z, 0.0)
    probs = softmax(preacts[-1])
    trace = ForwardTrace(net, inputs, preacts, weights, noises)
    return (probs[0] if single else probs), trace


def backward(net, trace, dscores):
    """Chain rule from d(loss)/d(scores) back to every (mu, rho).

    dscores has one row per batch row (a single vector is promoted);
    contributions are summed over the batch, so pre-scale dscores by 1/B
    for batch-mean gradients. Returns a per-layer list of dicts with keys
    w_mu, w_rho, b_mu, b_rho.
    """
    if trace.net is not net:
        raise ValueError("trace was recorded on a different network")
    g = np.asarray(dscores, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != trace.preacts[-1].shape:
        raise ValueError("dscores shape %s does not match trace scores %s"
                         % (g.shape, trace.preacts[-1].shape))
    grads = [None] * len(net.layers)
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        a_in = trace.inputs[i]
        W, _ = trace.weights[i]
        nw, nb = trace.noises[i]
        dW = matmul(g.T, a_in)
        db = g.sum(axis=0)
        basis_w = dist.noise_to_basis(layer.weights.family, nw)
        basis_b = dist.noise_to_basis(layer.biases.family, nb)
        grads[i] = {
            "w_mu": dW,
            "w_rho": dW * basis_w * sigmoid(layer.weights.rho),
            "b_mu": db,
            "b_rho": db * basis_b * sigmoid(layer.biases.rho),
        }
        if i > 0:
            g = matmul(g, W) * (trace.preacts[i - 1] > 0.0)
    return grads


def save_checkpoint(path, net, meta=None):
    """Write arch, family, all (mu, rho), priors, p_min and metadata.

    Arrays are stored as raw float64 in npz form, so the round trip is
    exact to the last bit. `meta` is any JSON-serializable dict (seeds,
    config hash, ...).
    """
    payload = {}
    for i, l in enumerate(net.layers):
        payload["layer%d_w_mu" % i] = l.weights.mu
        payload["layer%d_w_rho" % i] = l.weights.rho
        payload["layer%d_b_mu" % i] = l.biases.mu
        payload["layer%d_b_rho" % i] = l.biases.rho
        payload["layer%d_pw_mu" % i] = l.prior_weights.mu
        payload["layer%d_pw_scale" % i] = l.prior_weights.scale
        payload["layer%d_pb_mu" % i] = l.prior_biases.mu
        payload["layer%d_pb_scale" % i] = l.prior_biases.scale
    header = {
        "version": CHECKPOINT_VERSION,
        "family": net.family,
        "arch": net.arch,
        "p_min": net.p_min,
        "meta": meta or {},
    }
    payload["header_json"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (net, meta)."""
    with np.load(path) as z:
        header = json.loads(bytes(z["header_json"]).decode())
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version %r"
                             % header["version"])
        family = header["family"]
        arch = header["arch"]
        layers = []
        for i in range(len(arch) - 1):
            w = dist.CoordDistribution(family, z["layer%d_w_mu" % i],
                                       z["layer%d_w_rho" % i])
            b = dist.CoordDistribution(family, z["layer%d_b_mu" % i],
                                       z["layer%d_b_rho" % i])
            pw = dist.PriorSnapshot(family, z["layer%d_pw_mu" % i],
                                    z["layer%d_pw_scale" % i])
            pb = dist.PriorSnapshot(family, z["layer%d_pb_mu" % i],
                                    z["layer%d_pb_scale" % i])
            layers.append(ProbLayer(arch[i], arch[i + 1], w, b, pw, pb))
    net = ProbNetwork(layers, p_min=header["p_min"])
    return net, header["meta"]
