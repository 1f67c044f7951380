"""Dense feedforward classifier substrate.

Small MLP classifiers over float64 numpy arrays: seeded initialization,
overflow-safe softmax inference, analytic backpropagation for mean
cross-entropy, and mini-batch SGD with momentum under a step learning-rate
schedule. Models are plain values (flat parameter vector + immutable spec):
cheap to copy, safe to train in parallel, bitwise reproducible from a seed.

Parameter layout is canonical: layer by layer, weights then biases, with the
weight matrix of layer l stored row-major as (fan_in, fan_out).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, TrainingDivergedError
from .seeding import mask64

_ACT_CODE = {"relu": 0, "tanh": 1}
_CODE_ACT = {v: k for k, v in _ACT_CODE.items()}

CHECKPOINT_MAGIC = b"AOTM"
CHECKPOINT_VERSION = 1


# ── model definition ─────────────────────────────────────────────────


@dataclass(frozen=True)
class MlpSpec:
    """Architecture plus init seed. Equal specs produce identical parameters."""

    input_dim: int
    hidden_layers: tuple[int, ...] = ()
    num_classes: int = 2
    activation: str = "relu"
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        object.__setattr__(self, "rng_seed", mask64(self.rng_seed))
        if self.input_dim < 1:
            raise InvalidConfigError(f"input_dim must be positive, got {self.input_dim}")
        if self.num_classes < 1:
            raise InvalidConfigError(f"num_classes must be positive, got {self.num_classes}")
        if any(w < 1 for w in self.hidden_layers):
            raise InvalidConfigError(f"hidden layer widths must be positive, got {self.hidden_layers}")
        if self.activation not in _ACT_CODE:
            raise InvalidConfigError(f"unknown activation {self.activation!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for each layer, input to output."""
        dims = [self.input_dim, *self.hidden_layers, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    def param_count(self) -> int:
        return sum((fi + 1) * fo for fi, fo in self.layer_dims())

    def architecture(self) -> tuple:
        """Identity of the network shape, ignoring the init seed."""
        return (self.input_dim, self.hidden_layers, self.num_classes, self.activation)


class MlpModel:
    """A spec plus a flat float64 parameter vector."""

    __slots__ = ("spec", "params", "epoch_counter")

    def __init__(self, spec: MlpSpec, params: np.ndarray, epoch_counter: int = 0):
        params = np.asarray(params, dtype=np.float64).ravel()
        if params.size != spec.param_count():
            raise InvalidInputError(
                f"parameter count {params.size} does not match spec ({spec.param_count()})"
            )
        if not np.all(np.isfinite(params)):
            raise InvalidInputError("model parameters must be finite")
        self.spec = spec
        self.params = params
        self.epoch_counter = int(epoch_counter)

    @classmethod
    def initialize(cls, spec: MlpSpec) -> "MlpModel":
        """Seeded init: each layer's weights and biases drawn uniformly in
        +-sqrt(6 / (fan_in + fan_out))."""
        rng = np.random.default_rng(spec.rng_seed)
        chunks = []
        for fi, fo in spec.layer_dims():
            limit = np.sqrt(6.0 / (fi + fo))
            chunks.append(rng.uniform(-limit, limit, size=fi * fo))
            chunks.append(rng.uniform(-limit, limit, size=fo))
        return cls(spec, np.concatenate(chunks), epoch_counter=0)

    def copy(self) -> "MlpModel":
        return MlpModel(self.spec, self.params.copy(), self.epoch_counter)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into the flat parameter vector, one pair per layer."""
        out = []
        offset = 0
        for fi, fo in self.spec.layer_dims():
            w = self.params[offset : offset + fi * fo].reshape(fi, fo)
            offset += fi * fo
            b = self.params[offset : offset + fo]
            offset += fo
            out.append((w, b))
        return out


# ── validation helpers ───────────────────────────────────────────────


def _as_row(model: MlpModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.spec.input_dim:
        raise InvalidInputError(
            f"expected a feature row of length {model.spec.input_dim}, got shape {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("feature row contains non-finite values")
    return x


def _as_batch(model: MlpModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.spec.input_dim:
        raise InvalidInputError(
            f"expected a (batch, {model.spec.input_dim}) feature matrix, got shape {X.shape}"
        )
    if X.shape[0] == 0:
        raise InvalidInputError("batch is empty")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("feature matrix contains non-finite values")
    return X


def _as_labels(model: MlpModel, y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise InvalidInputError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.floor(y)):
            raise InvalidInputError("labels must be integers")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= model.spec.num_classes:
        raise InvalidInputError(
            f"labels must lie in [0, {model.spec.num_classes}), got range "
            f"[{y.min()}, {y.max()}]"
        )
    return y


# ── forward / inference ──────────────────────────────────────────────


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def _forward(model: MlpModel, X: np.ndarray):
    """Returns (logits, pre-activations per hidden layer, activations incl. input)."""
    act = model.spec.activation
    layers = model.layers()
    a = X
    zs: list[np.ndarray] = []
    acts: list[np.ndarray] = [X]
    for w, b in layers[:-1]:
        z = a @ w + b
        zs.append(z)
        a = _activate(z, act)
        acts.append(a)
    w, b = layers[-1]
    logits = a @ w + b
    return logits, zs, acts


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def logits_batch(model: MlpModel, X) -> np.ndarray:
    X = _as_batch(model, X)
    logits, _, _ = _forward(model, X)
    return logits


def probs_batch(model: MlpModel, X) -> np.ndarray:
    """Softmax class probabilities, one distribution per row."""
    return _softmax_rows(logits_batch(model, X))


def softmax_probs(model: MlpModel, x) -> np.ndarray:
    """Softmax output for one feature row: sums to 1, entries in (0, 1).

    Computed with max-subtraction so large logits cannot overflow.
    """
    x = _as_row(model, x)
    return probs_batch(model, x[None, :])[0]


def predict_batch(model: MlpModel, X) -> np.ndarray:
    # argmax returns the first (lowest-index) maximum, which is the tie rule.
    return np.argmax(probs_batch(model, X), axis=1).astype(np.int64)


def predict_label(model: MlpModel, x) -> int:
    """Most-probable class; ties resolve to the lowest class index."""
    return int(np.argmax(softmax_probs(model, x)))


# ── loss and gradients ───────────────────────────────────────────────


def loss_and_grad(model: MlpModel, X, y) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact analytic
    gradient, flattened in canonical parameter order."""
    X = _as_batch(model, X)
    y = _as_labels(model, y, X.shape[0])
    n = X.shape[0]
    act = model.spec.activation
    layers = model.layers()

    logits, zs, acts = _forward(model, X)
    probs = _softmax_rows(logits)
    with np.errstate(divide="ignore"):  # log(0) -> inf feeds the divergence guard
        loss = float(-np.mean(np.log(probs[np.arange(n), y])))

    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    grads: list[np.ndarray] = [None] * len(layers)  # type: ignore[list-item]
    dz = dlogits
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        a_prev = acts[li]
        dw = a_prev.T @ dz
        db = dz.sum(axis=0)
        grads[li] = np.concatenate([dw.ravel(), db])
        if li > 0:
            da = dz @ w.T
            dz = da * _activate_grad(zs[li - 1], act)
    return loss, np.concatenate(grads)


def input_grad_batch(model: MlpModel, X, y) -> np.ndarray:
    """Per-row gradient of each sample's own cross-entropy w.r.t. its input."""
    X = _as_batch(model, X)
    y = _as_labels(model, y, X.shape[0])
    n = X.shape[0]
    act = model.spec.activation
    layers = model.layers()

    logits, zs, _ = _forward(model, X)
    probs = _softmax_rows(logits)
    dz = probs
    dz[np.arange(n), y] -= 1.0
    for li in range(len(layers) - 1, 0, -1):
        w, _ = layers[li]
        dz = (dz @ w.T) * _activate_grad(zs[li - 1], act)
    w0, _ = layers[0]
    return dz @ w0.T


# ── SGD with momentum ────────────────────────────────────────────────


@dataclass(frozen=True)
class SgdConfig:
    base_lr: float
    momentum: float = 0.0
    lr_decay_factor: float = 1.0
    lr_decay_every: int = 30
    weight_decay: float = 0.0
    epochs: int = 1
    batch_size: int = 64

    def __post_init__(self):
        if self.base_lr <= 0:
            raise InvalidConfigError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfigError("momentum must lie in [0, 1)")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise InvalidConfigError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every < 1:
            raise InvalidConfigError("lr_decay_every must be a positive epoch count")
        if self.weight_decay < 0:
            raise InvalidConfigError("weight_decay must be nonnegative")
        if self.epochs < 1:
            raise InvalidConfigError("epochs must be positive")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be positive")


def effective_lr(cfg: SgdConfig, epoch: int) -> float:
    """Step schedule: base_lr * factor^floor(epoch / every), epoch 0-based."""
    return cfg.base_lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def sgd_update(params: np.ndarray, velocity: np.ndarray, grad: np.ndarray, lr: float, momentum: float) -> None:
    """In-place momentum step: v <- mu*v + g; params <- params - lr*v."""
    velocity *= momentum
    velocity += grad
    params -= lr * velocity


def train_supervised(
    model: MlpModel,
    data: tuple,
    cfg: SgdConfig,
    rng_seed: int,
) -> tuple[MlpModel, list[float]]:
    """Mini-batch SGD with momentum on mean cross-entropy.

    Returns a trained copy (the input model is untouched) and the per-epoch
    mean loss trace. Batch order is reshuffled each epoch from the derived
    seed (rng_seed XOR epoch index), so runs replay exactly. Weight decay, if
    nonzero, is added to the gradient as wd * params.
    """
    X, y = data
    out = model.copy()
    X = _as_batch(out, X)
    y = _as_labels(out, y, X.shape[0])
    n = X.shape[0]
    rng_seed = mask64(rng_seed)

    velocity = np.zeros_like(out.params)
    losses: list[float] = []
    for epoch in range(cfg.epochs):
        lr = effective_lr(cfg, epoch)
        order = np.random.default_rng(mask64(rng_seed ^ epoch)).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grad = loss_and_grad(out, X[idx], y[idx])
            total += loss * idx.size
            if cfg.weight_decay > 0.0:
                grad = grad + cfg.weight_decay * out.params
            sgd_update(out.params, velocity, grad, lr, cfg.momentum)
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(epoch)
        losses.append(mean_loss)
    out.epoch_counter += cfg.epochs
    return out, losses


def accuracy(model: MlpModel, X, y) -> float:
    """Fraction of rows whose predicted label matches y."""
    X = _as_batch(model, X)
    y = _as_labels(model, y, X.shape[0])
    return float(np.mean(predict_batch(model, X) == y))


# ── checkpoint files ─────────────────────────────────────────────────
#
# Little-endian binary: magic "AOTM", u32 version=1, u32 input_dim,
# u32 n_hidden, u32[n_hidden] widths, u32 num_classes, u8 activation code
# (relu=0, tanh=1), u64 epoch_counter, then parameters as f64 in canonical
# order. The init seed is not persisted; loaded specs carry rng_seed=0.


def save_model(model: MlpModel, path) -> None:
    spec = model.spec
    parts = [
        struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, spec.input_dim),
        struct.pack(f"<I{len(spec.hidden_layers)}I", len(spec.hidden_layers), *spec.hidden_layers),
        struct.pack("<IBQ", spec.num_classes, _ACT_CODE[spec.activation], model.epoch_counter),
        model.params.astype("<f8").tobytes(),
    ]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path) -> MlpModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        magic, version, input_dim = struct.unpack_from("<4sII", blob, 0)
        if magic != CHECKPOINT_MAGIC:
            raise InvalidInputError(f"bad checkpoint magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise InvalidInputError(f"unsupported checkpoint version {version}")
        offset = 12
        (n_hidden,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        widths = struct.unpack_from(f"<{n_hidden}I", blob, offset)
        offset += 4 * n_hidden
        num_classes, act_code, epochs = struct.unpack_from("<IBQ", blob, offset)
        offset += 13
        if act_code not in _CODE_ACT:
            raise InvalidInputError(f"unknown activation code {act_code}")
        spec = MlpSpec(input_dim, tuple(widths), num_classes, _CODE_ACT[act_code])
        params = np.frombuffer(blob, dtype="<f8", offset=offset)
        if params.size != spec.param_count():
            raise InvalidInputError(
                f"checkpoint holds {params.size} parameters, spec needs {spec.param_count()}"
            )
    except struct.error as exc:
        raise InvalidInputError(f"truncated checkpoint: {exc}") from exc
    return MlpModel(spec, params.astype(np.float64), epoch_counter=int(epochs))
