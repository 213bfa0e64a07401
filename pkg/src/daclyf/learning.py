"""Residual model of the CLF derivative: two ReLU networks fit by ERM.

The estimator is

    W'(eta, q, qd, u) = V'_est(eta, u) + a_hat(z) @ u + b_hat(z)

with z = (q, qd, dV/deta) and V'_est the model-based derivative. Both
networks are trained jointly on the squared error against numerically
differentiated V along recorded trajectories.
"""

from dataclasses import dataclass, field
import logging
import struct

import numpy as np

from .clf import error_state, lyap_value
from .numerics import central_difference

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """ERM produced a non-finite loss."""


class Mlp:
    """Two-layer network W2 relu(W1 x + b1) + b2 stored in one flat vector.

    W1 is (hidden, inputs), W2 is (outputs, hidden); both row-major inside
    `theta` in the order W1, b1, W2, b2.
    """

    def __init__(self, n_in, n_hidden, n_out, theta=None):
        self.n_in, self.n_hidden, self.n_out = n_in, n_hidden, n_out
        size = n_hidden * n_in + n_hidden + n_out * n_hidden + n_out
        if theta is None:
            theta = np.zeros(size)
        if theta.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {theta.shape}")
        self.bind(theta)

    def bind(self, theta):
        """Make the weight views point into `theta` (no copy)."""
        h, i, o = self.n_hidden, self.n_in, self.n_out
        self.theta = theta
        k = 0
        self.W1 = theta[k:k + h * i].reshape(h, i)
        k += h * i
        self.b1 = theta[k:k + h]
        k += h
        self.W2 = theta[k:k + o * h].reshape(o, h)
        k += o * h
        self.b2 = theta[k:k + o]

    @property
    def size(self):
        return self.theta.shape[0]

    @classmethod
    def he_init(cls, n_in, n_hidden, n_out, rng):
        net = cls(n_in, n_hidden, n_out)
        net.W1[:] = rng.normal(0.0, np.sqrt(2.0 / n_in), size=net.W1.shape)
        net.W2[:] = rng.normal(0.0, np.sqrt(1.0 / n_hidden), size=net.W2.shape)
        return net

    def copy(self):
        return Mlp(self.n_in, self.n_hidden, self.n_out, self.theta.copy())


def mlp_forward(net, x):
    """Evaluate the network on one input (n_in,) or a batch (N, n_in).

    Returns (output, cache); the cache feeds mlp_gradients.
    """
    x = np.asarray(x, dtype=float)
    pre = x @ net.W1.T + net.b1
    hidden = np.maximum(pre, 0.0)
    return hidden @ net.W2.T + net.b2, (x, pre, hidden)


def mlp_gradients(net, cache, upstream):
    """Reverse-mode gradient of sum(upstream * output) w.r.t. the flat parameters.

    For a batch, upstream has shape (N, n_out) and gradients are summed over
    the batch. The ReLU subgradient at zero is taken as zero.
    """
    x, pre, hidden = cache
    x = np.atleast_2d(x)
    pre = np.atleast_2d(pre)
    hidden = np.atleast_2d(hidden)
    upstream = np.atleast_2d(upstream)
    grad = np.empty_like(net.theta)
    g = Mlp(net.n_in, net.n_hidden, net.n_out, grad)
    g.W2[:] = upstream.T @ hidden
    g.b2[:] = upstream.sum(axis=0)
    d_pre = (upstream @ net.W2) * (pre > 0)
    g.W1[:] = d_pre.T @ x
    g.b1[:] = d_pre.sum(axis=0)
    return grad


def features(q, qd, eta, clf):
    """Network inputs: state followed by the CLF gradient. Works row-wise on batches."""
    eta = np.asarray(eta, dtype=float)
    grad = 2 * eta @ clf.P  # P symmetric
    return np.concatenate([np.asarray(q, dtype=float), np.asarray(qd, dtype=float), grad], axis=-1)


@dataclass
class Dataset:
    """Aggregated samples ((q, qd, eta, u), V') with time stamps and episode tags.

    base_drift / base_coeff cache the model-based V' decomposition per sample;
    they are filled by attach_base.
    """

    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    eta: np.ndarray
    u: np.ndarray
    vdot: np.ndarray
    episode: np.ndarray
    base_drift: np.ndarray = None
    base_coeff: np.ndarray = None

    def __len__(self):
        return len(self.vdot)

    @classmethod
    def empty(cls, n, k, m):
        return cls(np.zeros(0), np.zeros((0, n)), np.zeros((0, n)), np.zeros((0, 2 * k)),
                   np.zeros((0, m)), np.zeros(0), np.zeros(0, dtype=int),
                   np.zeros(0), np.zeros((0, m)))

    def attach_base(self, base):
        """Evaluate the model-based V' decomposition at every sample lacking it."""
        N = len(self)
        m = self.u.shape[1]
        done = 0 if self.base_drift is None else len(self.base_drift)
        drift = np.zeros(N)
        coeff = np.zeros((N, m))
        if done:
            drift[:done] = self.base_drift
            coeff[:done] = self.base_coeff
        for i in range(done, N):
            drift[i], coeff[i] = base(self.q[i], self.qd[i], self.t[i])
        self.base_drift, self.base_coeff = drift, coeff
        return self

    def extend(self, other):
        """Aggregate: D <- D u other. Never drops existing samples."""
        def cat(a, b):
            return np.concatenate([a, b])

        has_base = self.base_drift is not None and other.base_drift is not None \
            and len(self.base_drift) == len(self) and len(other.base_drift) == len(other)
        return Dataset(
            cat(self.t, other.t), cat(self.q, other.q), cat(self.qd, other.qd), cat(self.eta, other.eta),
            cat(self.u, other.u), cat(self.vdot, other.vdot), cat(self.episode, other.episode),
            cat(self.base_drift, other.base_drift) if has_base else None,
            cat(self.base_coeff, other.base_coeff) if has_base else None,
        )


DIFFERENCE_SCHEMES = ("midpoint", "central")


def make_dataset(traj, tp, clf, episode=0, scheme="midpoint"):
    """Turn a trajectory into one sample per held input.

    scheme="midpoint" pairs input u_i with (V_{i+1} - V_i) / dt, evaluated at
    the average of the two bracketing states and times. Under a zero-order
    hold this is second-order accurate even when the input jumps every tick.
    scheme="central" keeps the tick states and uses centred differences,
    which blend V' under two different held inputs.
    """
    if len(traj) < 3:
        raise ValueError("trajectory needs at least 3 recorded states")
    if scheme not in DIFFERENCE_SCHEMES:
        raise ValueError(f"unknown difference scheme {scheme!r}")
    dt = traj.times[1] - traj.times[0]
    N = len(traj.inputs)
    if scheme == "midpoint":
        q = (traj.q[1:N + 1] + traj.q[:N]) / 2
        qd = (traj.qd[1:N + 1] + traj.qd[:N]) / 2
        t = (traj.times[1:N + 1] + traj.times[:N]) / 2
        V = np.array([lyap_value(clf, error_state(tp, a, b, s)) for a, b, s in zip(traj.q, traj.qd, traj.times)])
        vdot = np.diff(V[:N + 1]) / dt
    else:
        q, qd, t = traj.q[:N].copy(), traj.qd[:N].copy(), traj.times[:N].copy()
        V = np.array([lyap_value(clf, error_state(tp, a, b, s)) for a, b, s in zip(traj.q, traj.qd, traj.times)])
        vdot = central_difference(V, dt)[:N]
    etas = np.array([error_state(tp, a, b, s) for a, b, s in zip(q, qd, t)])
    return Dataset(
        t=t, q=q, qd=qd, eta=etas.reshape(N, -1),
        u=traj.inputs.copy(), vdot=vdot, episode=np.full(N, episode, dtype=int),
    )


class ResidualEstimator:
    """Learned correction (a_hat, b_hat) on top of a model-based V' decomposition.

    Features are standardized with stored shift/scale and network outputs
    are multiplied by output_scale, so a_hat = output_scale * a_net(z) and
    b_hat = output_scale * b_net(z).
    """

    def __init__(self, a_net, b_net, base, tp, clf, feature_shift=None, feature_scale=None, output_scale=1.0):
        self.a_net, self.b_net = a_net, b_net
        self.base = base
        self.tp, self.clf = tp, clf
        n_in = a_net.n_in
        self.feature_shift = np.zeros(n_in) if feature_shift is None else np.asarray(feature_shift, dtype=float)
        self.feature_scale = np.ones(n_in) if feature_scale is None else np.asarray(feature_scale, dtype=float)
        self.output_scale = float(output_scale)

    @classmethod
    def zero(cls, n_features, m, base, tp, clf, hidden=1):
        """Estimator with a_hat = b_hat = 0, i.e. the model-based V' itself."""
        return cls(Mlp(n_features, hidden, m), Mlp(n_features, hidden, 1), base, tp, clf)

    @property
    def m(self):
        return self.a_net.n_out

    def normalized(self, z):
        return (z - self.feature_shift) / self.feature_scale

    def residual_terms(self, z):
        """(a_hat, b_hat) for raw features z, single or batched."""
        zn = self.normalized(z)
        a, _ = mlp_forward(self.a_net, zn)
        b, _ = mlp_forward(self.b_net, zn)
        return self.output_scale * a, self.output_scale * b[..., 0]

    def decomposition(self, q, qd, t):
        """(drift, input_coeff) of W' at (q, qd, t)."""
        eta = error_state(self.tp, q, qd, t)
        drift, coeff = self.base(q, qd, t)
        a, b = self.residual_terms(features(q, qd, eta, self.clf))
        return drift + float(b), coeff + a

    def predict(self, q, qd, t, u):
        drift, coeff = self.decomposition(q, qd, t)
        return drift + float(coeff @ np.atleast_1d(u))

    def predict_dataset(self, data):
        """W' at every sample of a dataset with attached base terms."""
        a, b = self.residual_terms(features(data.q, data.qd, data.eta, self.clf))
        return data.base_drift + np.sum(data.base_coeff * data.u, axis=1) + np.sum(a * data.u, axis=1) + b

    # flat binary layout, little endian:
    #   magic b"DCLF", uint32 version, uint32 n_in, uint32 hidden_a, uint32 m,
    #   uint32 hidden_b, then float64 blocks: feature_shift (n_in),
    #   feature_scale (n_in), output_scale (1), a_net theta, b_net theta
    MAGIC = b"DCLF"
    VERSION = 1

    def to_bytes(self):
        header = self.MAGIC + struct.pack("<5I", self.VERSION, self.a_net.n_in, self.a_net.n_hidden,
                                          self.a_net.n_out, self.b_net.n_hidden)
        body = np.concatenate([self.feature_shift, self.feature_scale, [self.output_scale],
                               self.a_net.theta, self.b_net.theta]).astype("<f8")
        return header + body.tobytes()

    @classmethod
    def from_bytes(cls, blob, base, tp, clf):
        if blob[:4] != cls.MAGIC:
            raise ValueError("not a serialized residual estimator")
        version, n_in, h_a, m, h_b = struct.unpack("<5I", blob[4:24])
        if version != cls.VERSION:
            raise ValueError(f"unsupported estimator version {version}")
        values = np.frombuffer(blob[24:], dtype="<f8").astype(float)
        a_net = Mlp(n_in, h_a, m)
        b_net = Mlp(n_in, h_b, 1)
        expected = 2 * n_in + 1 + a_net.size + b_net.size
        if values.shape[0] != expected:
            raise ValueError(f"expected {expected} parameters, found {values.shape[0]}")
        shift, scale = values[:n_in], values[n_in:2 * n_in]
        k = 2 * n_in + 1
        a_net.theta[:] = values[k:k + a_net.size]
        b_net.theta[:] = values[k + a_net.size:]
        return cls(a_net, b_net, base, tp, clf, shift, scale, values[2 * n_in])


@dataclass
class TrainingConfig:
    hidden: int = 128
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class TrainingHistory:
    initial_loss: float
    epoch_losses: list = field(default_factory=list)

    @property
    def final_loss(self):
        return self.epoch_losses[-1] if self.epoch_losses else self.initial_loss


def erm_loss(estimator, data):
    """Empirical risk: mean squared error of W' against the V' targets."""
    return float(np.mean((estimator.predict_dataset(data) - data.vdot) ** 2))


def fit_erm(data, base, tp, clf, hyper, rng, init=None):
    """Fit (a_hat, b_hat) by mini-batch Adam on the mean squared error.

    Networks start from `init` when given, otherwise from a fresh He-style
    draw from `rng`. Returns (estimator, history). The returned estimator
    is the one with the lowest full-dataset loss seen at epoch boundaries,
    so its loss never exceeds the initial one.
    """
    if len(data) == 0:
        raise ValueError("cannot fit on an empty dataset")
    if data.base_drift is None or len(data.base_drift) != len(data):
        data.attach_base(base)

    Z = features(data.q, data.qd, data.eta, clf)
    m = data.u.shape[1]
    n_in = Z.shape[1]
    residual = data.vdot - data.base_drift - np.sum(data.base_coeff * data.u, axis=1)

    if init is None:
        shift = Z.mean(axis=0)
        scale = Z.std(axis=0)
        scale[scale < 1e-12] = 1.0
        out_scale = float(np.sqrt(np.mean(residual ** 2)))
        if not out_scale > 1e-12:
            out_scale = 1.0
        a_net = Mlp.he_init(n_in, hyper.hidden, m, rng)
        b_net = Mlp.he_init(n_in, hyper.hidden, 1, rng)
        estimator = ResidualEstimator(a_net, b_net, base, tp, clf, shift, scale, out_scale)
    else:
        estimator = ResidualEstimator(init.a_net.copy(), init.b_net.copy(), base, tp, clf,
                                      init.feature_shift, init.feature_scale, init.output_scale)

    # train both networks through one flat parameter buffer
    a_net, b_net = estimator.a_net, estimator.b_net
    theta = np.concatenate([a_net.theta, b_net.theta])
    na = a_net.size
    a_net.bind(theta[:na])
    b_net.bind(theta[na:])

    Zn = estimator.normalized(Z)
    U = data.u
    target = residual / estimator.output_scale
    N = len(data)
    scale2 = estimator.output_scale ** 2

    def full_loss():
        a, _ = mlp_forward(a_net, Zn)
        b, _ = mlp_forward(b_net, Zn)
        return float(np.mean((np.sum(a * U, axis=1) + b[:, 0] - target) ** 2)) * scale2

    lr, (beta1, beta2), eps = hyper.learning_rate, hyper.betas, hyper.eps
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    grad = np.empty_like(theta)
    step = 0
    history = TrainingHistory(initial_loss=full_loss())
    best_loss, best_theta = history.initial_loss, theta.copy()

    for epoch in range(hyper.epochs):
        order = rng.permutation(N)
        for start in range(0, N, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            zb, ub = Zn[idx], U[idx]
            a, cache_a = mlp_forward(a_net, zb)
            b, cache_b = mlp_forward(b_net, zb)
            err = np.sum(a * ub, axis=1) + b[:, 0] - target[idx]
            up = (2.0 / len(idx)) * err
            grad[:na] = mlp_gradients(a_net, cache_a, up[:, None] * ub)
            grad[na:] = mlp_gradients(b_net, cache_b, up[:, None])
            step += 1
            m1 *= beta1
            m1 += (1 - beta1) * grad
            m2 *= beta2
            m2 += (1 - beta2) * grad * grad
            corr = np.sqrt(1 - beta2 ** step) / (1 - beta1 ** step)
            theta -= lr * corr * m1 / (np.sqrt(m2) + eps)
        loss = full_loss()
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch} (last finite {history.final_loss:.3e})")
        history.epoch_losses.append(loss)
        if loss < best_loss:
            best_loss, best_theta = loss, theta.copy()

    theta[:] = best_theta
    a_net.bind(theta[:na].copy())
    b_net.bind(theta[na:].copy())
    log.debug("ERM on %d samples: loss %.3e -> %.3e", N, history.initial_loss, best_loss)
    return estimator, history
