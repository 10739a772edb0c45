"""Small feed-forward networks: initialisation, SGD training, input gradients.

Networks have one or two sigmoid hidden layers and a single output unit with
identity (squared-error loss) or sigmoid (binary cross-entropy loss)
activation.  Weight matrices are stored ``(fan_out, fan_in)`` so that the
first hidden layer's ``[:, j]`` column is the vector of weights leaving input
``j``.

All heavy lifting happens on *stacks* of networks: every parameter array
carries a leading replicate axis.  A single network is a stack of one.  The
per-replicate arithmetic never mixes replicates, so a replicate's result does
not depend on what else shares its stack.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from . import seeding
from .errors import (
    DivergenceError,
    InvalidConfigError,
    InvalidInputError,
    ShapeError,
    UnsupportedArchitectureError,
)

ACTIVATIONS = ("identity", "sigmoid")


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and optimiser settings.

    ``init_scale=None`` means uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``
    per layer; a number fixes the half-width for every layer.
    """

    hidden_sizes: tuple = (40,)
    output_activation: str = "identity"
    epochs: int = 150
    initial_learning_rate: float = 0.1
    lr_decay_per_epoch: float = 0.015
    l2_lambda: float = 1e-4
    batch_size: int = 32
    init_scale: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        sizes = tuple(int(h) for h in self.hidden_sizes)
        object.__setattr__(self, "hidden_sizes", sizes)
        if len(sizes) not in (1, 2):
            raise InvalidConfigError("hidden_sizes must have 1 or 2 entries")
        if any(h <= 0 for h in sizes):
            raise InvalidConfigError(f"hidden sizes must be positive, got {sizes}")
        if self.output_activation not in ACTIVATIONS:
            raise InvalidConfigError(f"unknown output activation {self.output_activation!r}")
        if int(self.epochs) < 0:
            raise InvalidConfigError("epochs must be non-negative")
        if not self.initial_learning_rate > 0:
            raise InvalidConfigError("initial_learning_rate must be positive")
        if not 0 <= self.lr_decay_per_epoch < 1:
            raise InvalidConfigError("lr_decay_per_epoch must lie in [0, 1)")
        if not self.l2_lambda >= 0:
            raise InvalidConfigError("l2_lambda must be non-negative")
        if int(self.batch_size) < 1:
            raise InvalidConfigError("batch_size must be positive")
        if self.init_scale is not None and not self.init_scale >= 0:
            raise InvalidConfigError("init_scale must be non-negative")
        seeding.check_seed(self.seed)

    def learning_rate(self, epoch):
        return self.initial_learning_rate * (1.0 - self.lr_decay_per_epoch) ** epoch

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return {
            "hidden_sizes": list(self.hidden_sizes),
            "output_activation": self.output_activation,
            "epochs": int(self.epochs),
            "initial_learning_rate": float(self.initial_learning_rate),
            "lr_decay_per_epoch": float(self.lr_decay_per_epoch),
            "l2_lambda": float(self.l2_lambda),
            "batch_size": int(self.batch_size),
            "init_scale": None if self.init_scale is None else float(self.init_scale),
            "seed": int(self.seed),
        }


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Network:
    hidden_weights: tuple
    hidden_biases: tuple
    output_weights: np.ndarray
    output_bias: float
    output_activation: str = "identity"
    loss_history: np.ndarray = field(default_factory=lambda: _frozen([]))

    def __post_init__(self):
        hw = tuple(_frozen(w) for w in self.hidden_weights)
        hb = tuple(_frozen(b) for b in self.hidden_biases)
        ow = _frozen(self.output_weights)
        object.__setattr__(self, "hidden_weights", hw)
        object.__setattr__(self, "hidden_biases", hb)
        object.__setattr__(self, "output_weights", ow)
        object.__setattr__(self, "output_bias", float(self.output_bias))
        object.__setattr__(self, "loss_history", _frozen(self.loss_history))
        if self.output_activation not in ACTIVATIONS:
            raise InvalidConfigError(f"unknown output activation {self.output_activation!r}")
        if len(hw) not in (1, 2) or len(hb) != len(hw):
            raise ShapeError("network needs 1 or 2 hidden layers with matching biases")
        fan_in = hw[0].shape[1]
        for w, b in zip(hw, hb):
            if w.ndim != 2 or w.shape[1] != fan_in or b.shape != (w.shape[0],):
                raise ShapeError("hidden layer dimensions do not chain")
            fan_in = w.shape[0]
        if ow.shape != (fan_in,):
            raise ShapeError("output weights do not match last hidden layer")
        arrays = [*hw, *hb, ow, np.array([self.output_bias])]
        if not all(np.isfinite(a).all() for a in arrays):
            raise InvalidInputError("network parameters must be finite")

    @property
    def n_inputs(self):
        return self.hidden_weights[0].shape[1]

    @property
    def depth(self):
        return len(self.hidden_weights)

    @property
    def hidden_sizes(self):
        return tuple(w.shape[0] for w in self.hidden_weights)

    def parameters(self):
        return [*self.hidden_weights, *self.hidden_biases, self.output_weights,
                np.array([self.output_bias])]

    def same_parameters(self, other):
        """Bitwise equality of every parameter array."""
        a, b = self.parameters(), other.parameters()
        return len(a) == len(b) and all(
            x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: tuple = ()

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or y.ndim != 1:
            raise ShapeError("X must be n x p and y a vector")
        n, p = X.shape
        if n < 2 or p < 1:
            raise InvalidInputError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if y.shape[0] != n:
            raise ShapeError(f"y has {y.shape[0]} entries but X has {n} rows")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise InvalidInputError("data contain non-finite values")
        names = tuple(self.feature_names) or tuple(f"x{k + 1}" for k in range(p))
        if len(names) != p:
            raise ShapeError(f"{len(names)} feature names for {p} columns")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", tuple(str(s) for s in names))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def is_binary(self):
        return bool(np.isin(self.y, (0.0, 1.0)).all())

    def feature_index(self, name_or_index):
        if isinstance(name_or_index, (int, np.integer)):
            j = int(name_or_index)
            if not 0 <= j < self.p:
                raise InvalidInputError(f"feature index {j} out of range for p={self.p}")
            return j
        try:
            return self.feature_names.index(name_or_index)
        except ValueError:
            raise InvalidInputError(f"no feature named {name_or_index!r}") from None

    def with_X(self, X):
        return Dataset(X, self.y, self.feature_names)

    def with_y(self, y):
        return Dataset(self.X, y, self.feature_names)

    def standardized(self):
        """Copy with every column of X z-scored (constant columns only centred)."""
        mu = self.X.mean(axis=0)
        sd = self.X.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        return self.with_X((self.X - mu) / sd)


def holdout_split(data, fraction=0.2, seed=0):
    """Random train/validation split for hyperparameter selection."""
    if not 0 < fraction < 1:
        raise InvalidConfigError("fraction must lie in (0, 1)")
    n_val = int(round(fraction * data.n))
    if n_val < 1 or data.n - n_val < 2:
        raise InvalidInputError("dataset too small to split")
    order = np.random.default_rng(seeding.check_seed(seed)).permutation(data.n)
    val, tr = np.sort(order[:n_val]), np.sort(order[n_val:])
    return (Dataset(data.X[tr], data.y[tr], data.feature_names),
            Dataset(data.X[val], data.y[val], data.feature_names))


# ---------------------------------------------------------------------------
# stacked engine
# ---------------------------------------------------------------------------

@dataclass
class _Stack:
    """Parameters of R networks with a leading replicate axis."""

    W: list     # (R, out, in)
    b: list     # (R, out)
    wo: np.ndarray  # (R, h)
    bo: np.ndarray  # (R,)
    output_activation: str

    @property
    def R(self):
        return self.wo.shape[0]

    def copy(self):
        return _Stack([w.copy() for w in self.W], [v.copy() for v in self.b],
                      self.wo.copy(), self.bo.copy(), self.output_activation)

    def network(self, r, loss_history=()):
        return Network(tuple(w[r] for w in self.W), tuple(v[r] for v in self.b),
                       self.wo[r], self.bo[r], self.output_activation, loss_history)

    @classmethod
    def from_networks(cls, nets):
        act = nets[0].output_activation
        W = [np.stack([n.hidden_weights[l] for n in nets]) for l in range(nets[0].depth)]
        b = [np.stack([n.hidden_biases[l] for n in nets]) for l in range(nets[0].depth)]
        wo = np.stack([n.output_weights for n in nets])
        bo = np.array([n.output_bias for n in nets])
        return cls(W, b, wo, bo, act)


def _init_stack(p, config, seeds):
    R = len(seeds)
    sizes = (p, *config.hidden_sizes, 1)
    W, b = [], []
    draws = [[] for _ in range(len(sizes) - 1)]
    for s in seeds:
        g = seeding.rng(s, seeding.STREAM_INIT)
        for l in range(len(sizes) - 1):
            fan_in, fan_out = sizes[l], sizes[l + 1]
            scale = 1.0 / np.sqrt(fan_in) if config.init_scale is None else config.init_scale
            draws[l].append(g.uniform(-1.0, 1.0, size=(fan_out, fan_in)) * scale)
    for l in range(len(sizes) - 2):
        W.append(np.stack(draws[l]))
        b.append(np.zeros((R, sizes[l + 1])))
    wo = np.stack(draws[-1])[:, 0, :]
    return _Stack(W, b, wo, np.zeros(R), config.output_activation)


def _forward_stack(st, X):
    """Hidden activations list and output pre-activation for X of shape (R, m, p)."""
    acts = [X]
    A = X
    for W, b in zip(st.W, st.b):
        A = expit(np.matmul(A, W.transpose(0, 2, 1)) + b[:, None, :])
        acts.append(A)
    z = np.matmul(A, st.wo[:, :, None])[:, :, 0] + st.bo[:, None]
    return acts, z


def _output(z, activation):
    return z if activation == "identity" else expit(z)


def _backward_stack(st, acts, dz):
    """Backpropagate output pre-activation sensitivities ``dz`` of shape (R, m).

    Returns parameter gradients (summed over rows) and the input sensitivities.
    """
    gW, gb = [None] * len(st.W), [None] * len(st.W)
    A_last = acts[-1]
    g_wo = np.matmul(dz[:, None, :], A_last)[:, 0, :]
    g_bo = dz.sum(axis=1)
    dA = dz[:, :, None] * st.wo[:, None, :]
    for l in range(len(st.W) - 1, -1, -1):
        A = acts[l + 1]
        dZ = dA * A * (1.0 - A)
        gW[l] = np.matmul(dZ.transpose(0, 2, 1), acts[l])
        gb[l] = dZ.sum(axis=1)
        dA = np.matmul(dZ, st.W[l])
    return gW, gb, g_wo, g_bo, dA


def _data_loss(z, y, activation):
    """Per-row loss (R, m)."""
    if activation == "identity":
        return (z - y) ** 2
    return np.logaddexp(0.0, z) - y * z


def _penalty(st):
    tot = sum((W ** 2).sum(axis=(1, 2)) for W in st.W)
    return tot + (st.wo ** 2).sum(axis=1)


@dataclass
class StackTrainResult:
    stack: _Stack
    losses: np.ndarray       # (R, epochs)
    failed_epoch: np.ndarray  # (R,), -1 when the replicate trained cleanly

    @property
    def failed(self):
        return self.failed_epoch >= 0


def _sigmoid_(a):
    """In-place logistic function."""
    np.negative(a, out=a)
    np.exp(a, out=a)
    a += 1.0
    np.reciprocal(a, out=a)
    return a


class _Workspace:
    """Preallocated per-minibatch-size buffers; fresh multi-MB temporaries at
    every step cost more in page faults than the arithmetic itself."""

    def __init__(self, R, mb, p, sizes):
        self.Xb = np.empty((R, mb, p))
        self.yb = np.empty((R, mb))
        self.z = np.empty((R, mb, 1))
        self.acts = [np.empty((R, mb, h)) for h in sizes]
        self.tmp = [np.empty((R, mb, h)) for h in sizes]
        self.dA = [np.empty((R, mb, h)) for h in sizes]
        fan_in = (p, *sizes[:-1])
        self.gW = [np.empty((R, h, f)) for h, f in zip(sizes, fan_in)]
        self.gwo = np.empty((R, 1, sizes[-1]))


def _sgd_step(st, ws, lr, lam, act):
    """One minibatch update in place; returns the per-replicate data-loss sums."""
    mb = ws.yb.shape[1]
    A = ws.Xb
    for l, (W, b) in enumerate(zip(st.W, st.b)):
        np.matmul(A, W.transpose(0, 2, 1), out=ws.acts[l])
        ws.acts[l] += b[:, None, :]
        A = _sigmoid_(ws.acts[l])
    np.matmul(A, st.wo[:, :, None], out=ws.z)
    z = ws.z[:, :, 0]
    z += st.bo[:, None]
    if act == "identity":
        diff = z - ws.yb
        sse = np.einsum("rm,rm->r", diff, diff)
        dz = diff * (2.0 / mb)
    else:
        sse = (np.logaddexp(0.0, z) - ws.yb * z).sum(axis=1)
        dz = (expit(z) - ws.yb) * (1.0 / mb)
    np.matmul(dz[:, None, :], A, out=ws.gwo)
    g_bo = dz.sum(axis=1)
    dA = ws.dA[-1]
    np.multiply(dz[:, :, None], st.wo[:, None, :], out=dA)
    for l in range(len(st.W) - 1, -1, -1):
        A = ws.acts[l]
        dA *= A
        np.subtract(1.0, A, out=ws.tmp[l])
        dA *= ws.tmp[l]
        prev = ws.Xb if l == 0 else ws.acts[l - 1]
        np.matmul(dA.transpose(0, 2, 1), prev, out=ws.gW[l])
        gb = dA.sum(axis=1)
        if l > 0:
            np.matmul(dA, st.W[l], out=ws.dA[l - 1])
            # st.W[l] is read above before being updated below
        shrink = 1.0 - 2.0 * lr * lam
        st.W[l] *= shrink
        ws.gW[l] *= lr
        st.W[l] -= ws.gW[l]
        st.b[l] -= lr * gb
        dA = ws.dA[l - 1] if l > 0 else None
    st.wo *= 1.0 - 2.0 * lr * lam
    st.wo -= lr * ws.gwo[:, 0, :]
    st.bo -= lr * g_bo
    return sse


def _train_stack(st, X, y, config, seeds):
    """Minibatch SGD on a stack. X is (R, n, p) (or (n, p) shared), y is (R, n).

    Per step: ``W <- W - lr * (grad + 2 * l2 * W)`` for weights, plain
    gradient steps for biases; ``lr`` decays geometrically per epoch.
    """
    st = st.copy()
    R = st.R
    y = np.ascontiguousarray(y, dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    n, p = y.shape[1], X.shape[-1]
    shared_X = X.ndim == 2
    Xflat = X if shared_X else X.reshape(R * n, p)
    yflat = y.reshape(R * n)
    epochs, m = int(config.epochs), int(config.batch_size)
    lam = float(config.l2_lambda)
    act = st.output_activation
    losses = np.full((R, epochs), np.nan)
    failed_epoch = np.full(R, -1)
    gens = [seeding.rng(s, seeding.STREAM_SHUFFLE) for s in seeds]
    offset = (np.arange(R) * n)[:, None]
    sizes = tuple(w.shape[1] for w in st.W)
    spaces = {}
    with np.errstate(over="ignore", invalid="ignore"):
        for e in range(epochs):
            lr = config.learning_rate(e)
            order = np.stack([g.permutation(n) for g in gens]) + offset
            sse = np.zeros(R)
            for start in range(0, n, m):
                idx = order[:, start:start + m]
                mb = idx.shape[1]
                ws = spaces.get(mb)
                if ws is None:
                    ws = spaces[mb] = _Workspace(R, mb, p, sizes)
                np.take(Xflat, idx - offset if shared_X else idx, axis=0, out=ws.Xb)
                np.take(yflat, idx, out=ws.yb)
                sse += _sgd_step(st, ws, lr, lam, act)
            losses[:, e] = sse / n + lam * _penalty(st)
            bad = ~np.isfinite(losses[:, e]) & (failed_epoch < 0)
            failed_epoch[bad] = e
    return StackTrainResult(st, losses, failed_epoch)


def _input_gradients_stack(st, X, j):
    """d(output)/d(x_j) at every row of X, shape (R, n)."""
    if X.ndim == 2:
        X = np.broadcast_to(X, (st.R, *X.shape))
    acts, z = _forward_stack(st, X)
    if st.output_activation == "identity":
        dz = np.ones_like(z)
    else:
        s = expit(z)
        dz = s * (1.0 - s)
    dA = dz[:, :, None] * st.wo[:, None, :]
    for l in range(len(st.W) - 1, 0, -1):
        A = acts[l + 1]
        dA = np.matmul(dA * A * (1.0 - A), st.W[l])
    A = acts[1]
    # only input column j is needed from the first layer
    return np.matmul(dA * A * (1.0 - A), st.W[0][:, :, j:j + 1])[:, :, 0]


# ---------------------------------------------------------------------------
# public single-network API
# ---------------------------------------------------------------------------

def init_network(p, config):
    """Fresh network for ``p`` inputs, weights uniform in ``[-s, s]``, zero biases."""
    if int(p) < 1:
        raise InvalidInputError("input dimension must be at least 1")
    return _init_stack(int(p), config, [config.seed]).network(0)


def init_networks(p, config, seeds):
    st = _init_stack(int(p), config, list(seeds))
    return [st.network(r) for r in range(st.R)]


def _as_rows(net, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X2 = X[None, :] if single else X
    if X2.ndim != 2 or X2.shape[1] != net.n_inputs:
        raise ShapeError(f"expected {net.n_inputs} inputs, got shape {X.shape}")
    return X2, single


def forward(net, x):
    """Network output for one input vector (scalar) or a matrix of rows (vector)."""
    X, single = _as_rows(net, x)
    st = _Stack.from_networks([net])
    _, z = _forward_stack(st, X[None])
    out = _output(z, net.output_activation)[0]
    return float(out[0]) if single else out


def train(net, data, config):
    """Train a copy of ``net`` on ``data`` for ``config.epochs`` epochs.

    The returned network carries ``loss_history`` (one penalised training loss
    per epoch).  Raises :class:`DivergenceError` on a non-finite loss.
    """
    if data.p != net.n_inputs:
        raise ShapeError(f"network expects {net.n_inputs} inputs, data has {data.p}")
    if config.output_activation != net.output_activation:
        raise InvalidConfigError("config and network disagree on output activation")
    if config.epochs == 0:
        return net
    res = _train_stack(_Stack.from_networks([net]), data.X, data.y[None, :], config,
                       [config.seed])
    if res.failed[0]:
        raise DivergenceError(int(res.failed_epoch[0]))
    return res.stack.network(0, res.losses[0])


def fit_network(data, config):
    """``init_network`` followed by ``train``."""
    return train(init_network(data.p, config), data, config)


def train_replicates(X, Y, config, seeds):
    """Initialise and train one network per seed.

    ``X`` is either a shared (n, p) matrix or an (R, n, p) stack; ``Y`` is
    (R, n).  Replicate ``r`` is initialised and shuffled from ``seeds[r]``.
    Divergent replicates are flagged, never raised.
    """
    seeds = list(seeds)
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    p = X.shape[-1]
    if Y.shape[0] != len(seeds) or (X.ndim == 3 and X.shape[0] != len(seeds)):
        raise ShapeError("one seed per replicate required")
    return _train_stack(_init_stack(p, config, seeds), X, Y, config, seeds)


def input_gradients(net, X, j):
    """Reverse-mode d(output)/d(x_j) at every row of X."""
    X2, _ = _as_rows(net, X)
    _check_feature(net, j)
    return _input_gradients_stack(_Stack.from_networks([net]), X2, j)[0]


def _check_feature(net, j):
    if not 0 <= int(j) < net.n_inputs:
        raise ShapeError(f"feature index {j} out of range for {net.n_inputs} inputs")


def input_gradient_backprop(net, x, j):
    """Reverse-mode derivative of the output w.r.t. input ``j`` at one point."""
    X, single = _as_rows(net, x)
    g = input_gradients(net, X, j)
    return float(g[0]) if single else g


def input_gradient_closed_form(net, x, j):
    """Closed-form derivative for a one-hidden-layer network.

    ``g0'(w0 . a + d0) * w0 . (g1'(W1 x + d1) * W1[:, j])`` with ``a`` the hidden
    activations; accepts a single point or a matrix of rows.
    """
    if net.depth != 1:
        raise UnsupportedArchitectureError(
            "closed form covers one hidden layer only; use input_gradient_backprop")
    X, single = _as_rows(net, x)
    _check_feature(net, j)
    W1, d1 = net.hidden_weights[0], net.hidden_biases[0]
    w0, d0 = net.output_weights, net.output_bias
    alpha = expit(X @ W1.T + d1)
    z0 = alpha @ w0 + d0
    if net.output_activation == "identity":
        outer = np.ones_like(z0)
    else:
        s = expit(z0)
        outer = s * (1.0 - s)
    inner = (alpha * (1.0 - alpha) * W1[:, j]) @ w0
    g = outer * inner
    return float(g[0]) if single else g


def loss(net, data):
    """Unpenalised mean training loss (MSE or binary cross-entropy)."""
    st = _Stack.from_networks([net])
    _, z = _forward_stack(st, data.X[None])
    return float(_data_loss(z, data.y[None], net.output_activation).mean())


def select_config(data, candidates: Sequence[NetworkConfig], fraction=0.2, seed=0):
    """Pick the candidate with the lowest validation loss on a holdout split.

    Returns ``(best_config, validation_losses)``; divergent candidates score inf.
    """
    train_part, val_part = holdout_split(data, fraction, seed)
    scores = []
    for cfg in candidates:
        try:
            net = fit_network(train_part, cfg)
            scores.append(loss(net, val_part))
        except DivergenceError:
            scores.append(np.inf)
    best = int(np.argmin(scores))
    return candidates[best], scores
