"""Small dense networks with hand-written backpropagation.

Two models live here: the attacker's surrogate (an embedding sub-network
followed by a classification head) and the reconstruction autoencoder
used for anomaly detection. Both standardize their inputs with a frozen
affine scaler that is part of the model, so input gradients are taken in
raw feature units.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

EMBED_WIDTH = 16
ACTIVATIONS = ("relu", "prelu", "linear")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 70
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    patience: int = 2
    seed: int = 0
    batch_size: int = 64
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Dense:
    W: np.ndarray
    b: np.ndarray
    activation: str = "linear"
    slope: np.ndarray | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ValueError("weight/bias shapes do not match")
        if self.activation == "prelu":
            if self.slope is None:
                self.slope = np.full(self.W.shape[1], 0.25)
            self.slope = np.asarray(self.slope, dtype=np.float64)

    @property
    def n_in(self):
        return self.W.shape[0]

    @property
    def n_out(self):
        return self.W.shape[1]

    def params(self):
        return [self.W, self.b] + ([self.slope] if self.activation == "prelu" else [])

    def forward(self, h):
        z = h @ self.W + self.b
        if self.activation == "relu":
            a = np.maximum(z, 0.0)
        elif self.activation == "prelu":
            a = np.where(z > 0, z, self.slope * z)
        else:
            a = z
        return z, a

    def backward(self, h, z, da):
        """Return (grad wrt input h, list of parameter grads)."""
        if self.activation == "relu":
            dz = da * (z > 0)
        elif self.activation == "prelu":
            dz = np.where(z > 0, da, self.slope * da)
        else:
            dz = da
        grads = [h.T @ dz, dz.sum(axis=0)]
        if self.activation == "prelu":
            grads.append(np.sum(np.where(z > 0, 0.0, z) * da, axis=0))
        return dz @ self.W.T, grads


def _init_dense(rng, n_in, n_out, activation):
    limit = np.sqrt(6.0 / (n_in + n_out))
    W = rng.uniform(-limit, limit, size=(n_in, n_out))
    return Dense(W, np.zeros(n_out), activation)


def _run(layers, h, dropout=None):
    """Forward pass keeping what backprop needs.

    ``dropout`` is ``(layer_index, mask)``: the mask multiplies that
    layer's output (inverted dropout, already scaled).
    """
    cache = []
    for i, layer in enumerate(layers):
        z, a = layer.forward(h)
        if dropout is not None and dropout[0] == i:
            a = a * dropout[1]
        cache.append((h, z))
        h = a
    return h, cache


def _backprop(layers, cache, grad, dropout=None):
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        if dropout is not None and dropout[0] == i:
            grad = grad * dropout[1]
        h, z = cache[i]
        grad, g = layers[i].backward(h, z, grad)
        grads.append(g)
    return grad, grads[::-1]


@dataclass
class Scaler:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=np.float64)
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.ones(d))

    def __call__(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale


@dataclass
class SurrogateModel:
    scaler: Scaler
    embed: list
    head: list
    dropout: float = 0.1
    history: list = field(default_factory=list)

    def __post_init__(self):
        check_chain(self.embed + self.head, self.scaler.mean.size)
        if self.embed[-1].n_out != EMBED_WIDTH:
            raise ValueError(f"embedding width must be {EMBED_WIDTH}")
        if self.head[-1].n_out != 1:
            raise ValueError("classifier head must end in a single output")

    @property
    def n_features(self):
        return self.scaler.mean.size

    def _input(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"dimension mismatch: expected {self.n_features} features")
        return X

    def logit(self, X):
        e, _ = _run(self.embed, self.scaler(self._input(X)))
        out, _ = _run(self.head, e)
        return out[:, 0]

    def predict_proba(self, X):
        return 0.5 * (1.0 + np.tanh(0.5 * self.logit(X)))

    def params(self):
        return [p for layer in self.embed + self.head for p in layer.params()]


def check_chain(layers, n_in):
    for layer in layers:
        if layer.n_in != n_in:
            raise ValueError("consecutive layer dimensions do not match")
        n_in = layer.n_out


def forward_embed(m: SurrogateModel, sample) -> np.ndarray:
    """Embedding of one sample (vector) or many (matrix). Dropout is off."""
    X = m._input(sample)
    e, _ = _run(m.embed, m.scaler(X))
    return e[0] if np.ndim(sample) == 1 else e


def build_surrogate(n_features, arch=((256, "relu"), (16, "linear")), head_activation="relu",
                    dropout=0.1, seed=0, scaler=None) -> SurrogateModel:
    """Randomly initialised surrogate.

    ``arch`` lists the embedding layers as (width, activation); the last
    width must be 16. The head is Dense(16, head_activation) -> dropout ->
    Dense(1) with a sigmoid on the output.
    """
    rng = np.random.default_rng(seed)
    embed = []
    n_in = n_features
    for width, act in arch:
        embed.append(_init_dense(rng, n_in, int(width), act))
        n_in = int(width)
    if n_in != EMBED_WIDTH:
        raise ValueError(f"embedding width must be {EMBED_WIDTH}")
    head = [_init_dense(rng, EMBED_WIDTH, EMBED_WIDTH, head_activation),
            _init_dense(rng, EMBED_WIDTH, 1, "linear")]
    scaler = scaler if scaler is not None else Scaler.identity(n_features)
    return SurrogateModel(scaler, embed, head, dropout)


def _softplus(z):
    return np.logaddexp(0.0, z)


def _bce_logits(z, y):
    return _softplus(z) - y * z


def adv_objective(m: SurrogateModel, x_adv, x, y, alpha=1.0):
    """Adversarial loss and its exact gradient with respect to ``x_adv``.

    loss = -BCE(M(x_adv), y) + alpha * ||phi(x_adv) - phi(x)||_2, with
    phi the embedding sub-network. The distance term contributes a zero
    gradient where the two embeddings coincide.
    """
    x_adv = m._input(x_adv)
    x = m._input(x)
    if not (np.all(np.isfinite(x_adv)) and np.all(np.isfinite(x))):
        raise ValueError("non-finite input")
    e_ref, _ = _run(m.embed, m.scaler(x))
    e, ecache = _run(m.embed, m.scaler(x_adv))
    out, hcache = _run(m.head, e)
    z = out[0, 0]
    diff = e[0] - e_ref[0]
    dist = float(np.sqrt(diff @ diff))
    loss = -float(_bce_logits(z, y)) + alpha * dist

    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    dz = np.array([[y - p]])
    de, _ = _backprop(m.head, hcache, dz)
    if dist > 0.0:
        de = de + alpha * diff / dist
    dx, _ = _backprop(m.embed, ecache, de)
    grad = dx[0] / m.scaler.scale
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise FloatingPointError("non-finite intermediate in adversarial objective")
    return loss, grad


def grad_input(m: SurrogateModel, x_adv, x, y, alpha=1.0) -> np.ndarray:
    return adv_objective(m, x_adv, x, y, alpha)[1]


class Adam:
    """Adam with optional L2 weight decay added to the gradient."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def deltas(self, grads):
        self.t += 1
        out = []
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.weight_decay:
                g = g + self.weight_decay * p
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            out.append(-self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out

    def step(self, grads):
        for p, d in zip(self.params, self.deltas(grads)):
            p += d


def _xy(train):
    if hasattr(train, "rows"):
        return np.asarray(train.rows, dtype=np.float64), np.asarray(train.labels, dtype=np.float64)
    X, y = train
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64)


def _surrogate_loss(m, X, y):
    return float(np.mean(_bce_logits(m.logit(X), y)))


def train_surrogate(train, arch=((256, "relu"), (16, "linear")), cfg: TrainConfig | None = None,
                    head_activation="relu", dropout=0.1) -> SurrogateModel:
    """Fit the surrogate with binary cross-entropy and Adam.

    A seeded slice of the training rows is held out for early stopping;
    the parameters from the epoch with the lowest validation loss are
    the ones returned.
    """
    cfg = cfg or TrainConfig()
    X, y = _xy(train)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise ValueError("surrogate needs binary labels")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(X.shape[0])
    n_val = int(round(cfg.validation_fraction * X.shape[0]))
    if X.shape[0] - n_val < 1:
        n_val = 0
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    Xtr, ytr = X[tr_idx], y[tr_idx]
    Xval, yval = (X[val_idx], y[val_idx]) if n_val else (Xtr, ytr)

    m = build_surrogate(X.shape[1], arch, head_activation, dropout, seed=int(rng.integers(2**31)),
                        scaler=Scaler.fit(Xtr))
    layers = m.embed + m.head
    opt = Adam(m.params(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    n_embed = len(m.embed)
    best = (_surrogate_loss(m, Xval, yval), copy.deepcopy(layers))
    wait = 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(Xtr.shape[0])
        for start in range(0, order.size, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            h = m.scaler(Xtr[b])
            drop = None
            if dropout > 0:
                keep = rng.random((b.size, EMBED_WIDTH)) >= dropout
                drop = (n_embed, keep / (1.0 - dropout))
            out, cache = _run(layers, h, drop)
            z = out[:, 0]
            p = 0.5 * (1.0 + np.tanh(0.5 * z))
            dz = ((p - ytr[b]) / b.size)[:, None]
            _, grads = _backprop(layers, cache, dz, drop)
            opt.step([g for layer_grads in grads for g in layer_grads])
        val = _surrogate_loss(m, Xval, yval)
        history.append(val)
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        if val < best[0]:
            best = (val, copy.deepcopy(layers))
            wait = 0
        else:
            wait += 1
            if wait >= max(cfg.patience, 1):
                break
    embed = best[1][:n_embed]
    head = best[1][n_embed:]
    return SurrogateModel(m.scaler, embed, head, dropout, history)


# -- autoencoder ------------------------------------------------------------

@dataclass
class AeNet:
    scaler: Scaler
    encoder: Dense
    decoder: Dense

    def __post_init__(self):
        d = self.scaler.mean.size
        if self.encoder.n_in != d or self.decoder.n_out != d:
            raise ValueError("autoencoder output width must equal input width")
        if self.encoder.n_out != self.decoder.n_in:
            raise ValueError("encoder and decoder shapes are not symmetric")

    def reconstruct(self, X):
        """Reconstruction in standardized units."""
        _, h = self.encoder.forward(self.scaler(X))
        return self.decoder.forward(h)[1]


def mean_squared_deviation(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.mean((a - b) ** 2, axis=-1)


def reconstruction_error(ae: AeNet, sample):
    """Mean squared deviation between (standardized) input and reconstruction."""
    X = np.asarray(sample, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    err = mean_squared_deviation(ae.scaler(X), ae.reconstruct(X))
    return float(err[0]) if single else err


def fit_autoencoder(benign, cfg: TrainConfig | None = None, hidden=64) -> AeNet:
    """Fit a d -> hidden -> d ReLU autoencoder on the mean squared error."""
    cfg = cfg or TrainConfig(epochs=10, learning_rate=1e-3, weight_decay=1e-8, batch_size=32)
    X = np.asarray(benign, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("autoencoder needs at least two rows")
    rng = np.random.default_rng(cfg.seed)
    d = X.shape[1]
    scaler = Scaler.fit(X)
    enc = _init_dense(rng, d, hidden, "relu")
    dec = _init_dense(rng, hidden, d, "linear")
    layers = [enc, dec]
    opt = Adam([p for layer in layers for p in layer.params()], lr=cfg.learning_rate,
               weight_decay=cfg.weight_decay)
    Z = scaler(X)
    for _ in range(cfg.epochs):
        order = rng.permutation(Z.shape[0])
        for start in range(0, order.size, cfg.batch_size):
            zb = Z[order[start:start + cfg.batch_size]]
            out, cache = _run(layers, zb)
            grad = 2.0 * (out - zb) / zb.size
            _, grads = _backprop(layers, cache, grad)
            opt.step([g for lg in grads for g in lg])
        if not np.all(np.isfinite(enc.W)):
            raise TrainingDiverged("autoencoder weights became non-finite")
    return AeNet(scaler, enc, dec)
