"""A small convolutional network with the QTDU head, trained from scratch.

The network is a configurable stack of 3x3 same-padding convolutions, ReLU
and 2x2 max-pooling, followed by the fixed head

    Dense(width) + ReLU -> Dropout(0.5) -> Dense(width) + ReLU
    -> Dropout(0.5) -> Dense(4) -> softmax

trained with mini-batch SGD with momentum on categorical cross-entropy.
Everything runs in float64 numpy; given a seed, training is bit-reproducible
on the same platform.  Dropout is "inverted" (activations are rescaled at
training time), so inference is plain forward evaluation.

The layer machinery is deliberately generic over input shape and output
width: the baseline multi-layer perceptron in `classifiers` reuses it on
flat feature vectors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import InvalidArgumentError, TrainingError
from .imagecore import Patch, TissueClass

_HEAD_DROPOUT = 0.5
_IMPROVEMENT = 1e-6
_MAGIC = b"USNN"


# ---------------------------------------------------------------------------
# layers


class Dense:
    kind = "dense"

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = w
        self.b = b

    @property
    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        return x @ self.w + self.b, x

    def backward(self, cache, grad):
        x = cache
        dw = x.T @ grad
        db = grad.sum(axis=0)
        return grad @ self.w.T, [dw, db]


class Conv3x3:
    """3x3 convolution, stride 1, same padding, NHWC layout (im2col)."""

    kind = "conv"

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = w  # (3, 3, c_in, c_out)
        self.b = b

    @property
    def params(self):
        return [self.w, self.b]

    def _cols(self, x):
        n, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = np.empty((n, h, w, 9 * c))
        for dy in range(3):
            for dx in range(3):
                i = dy * 3 + dx
                cols[..., i * c:(i + 1) * c] = xp[:, dy:dy + h, dx:dx + w, :]
        return cols

    def forward(self, x):
        c_out = self.w.shape[3]
        cols = self._cols(x)
        out = cols @ self.w.reshape(-1, c_out) + self.b
        return out, (cols, x.shape)

    def backward(self, cache, grad):
        cols, x_shape = cache
        n, h, w, c = x_shape
        c_out = self.w.shape[3]
        dw = (cols.reshape(-1, 9 * c).T @ grad.reshape(-1, c_out)).reshape(self.w.shape)
        db = grad.reshape(-1, c_out).sum(axis=0)
        dcols = grad @ self.w.reshape(-1, c_out).T
        dxp = np.zeros((n, h + 2, w + 2, c))
        for dy in range(3):
            for dx in range(3):
                i = dy * 3 + dx
                dxp[:, dy:dy + h, dx:dx + w, :] += dcols[..., i * c:(i + 1) * c]
        return dxp[:, 1:h + 1, 1:w + 1, :], [dw, db]


class ReLU:
    kind = "relu"
    params = []

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, cache, grad):
        return grad * (cache > 0.0), []


class MaxPool2:
    """2x2 max pooling, stride 2 (trailing odd row/column dropped)."""

    kind = "maxpool"
    params = []

    def forward(self, x):
        n, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        cells = x[:, :h2 * 2, :w2 * 2, :].reshape(n, h2, 2, w2, 2, c)
        cells = cells.transpose(0, 1, 3, 2, 4, 5).reshape(n, h2, w2, 4, c)
        winner = cells.argmax(axis=3)
        out = np.take_along_axis(cells, winner[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        return out, (x.shape, winner)

    def backward(self, cache, grad):
        (n, h, w, c), winner = cache
        h2, w2 = h // 2, w // 2
        dcells = np.zeros((n, h2, w2, 4, c))
        np.put_along_axis(dcells, winner[:, :, :, None, :], grad[:, :, :, None, :], axis=3)
        dx = np.zeros((n, h, w, c))
        dx[:, :h2 * 2, :w2 * 2, :] = dcells.reshape(n, h2, w2, 2, 2, c) \
            .transpose(0, 1, 3, 2, 4, 5).reshape(n, h2 * 2, w2 * 2, c)
        return dx, []


class Flatten:
    kind = "flatten"
    params = []

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad):
        return grad.reshape(cache), []


class Dropout:
    """Inverted dropout; the mask for each forward pass is supplied by the caller."""

    kind = "dropout"
    params = []

    def __init__(self, rate: float = _HEAD_DROPOUT):
        self.rate = rate

    def forward(self, x, mask=None):
        if mask is None:
            return x, None
        scale = 1.0 / (1.0 - self.rate)
        return x * mask * scale, mask

    def backward(self, cache, grad):
        if cache is None:
            return grad, []
        return grad * cache * (1.0 / (1.0 - self.rate)), []

    def draw_mask(self, shape, rng):
        return rng.random(shape) >= self.rate


class Network:
    """An ordered layer stack with explicit, caller-controlled dropout masks."""

    def __init__(self, layers):
        self.layers = list(layers)

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params)
        return out

    def dropout_layers(self):
        return [l for l in self.layers if isinstance(l, Dropout)]

    def forward(self, x, dropout_masks=None):
        """Run the stack; returns (logits, caches).  masks maps layer index -> mask."""
        caches = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                mask = None if dropout_masks is None else dropout_masks.get(i)
                x, cache = layer.forward(x, mask)
            else:
                x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad):
        """Backpropagate d loss / d logits; returns gradients aligned with parameters()."""
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            grad, layer_grads = self.layers[i].backward(caches[i], grad)
            grads[i] = layer_grads
        flat = []
        for g in grads:
            flat.extend(g)
        return flat

    def draw_masks(self, batch_size, rng, feature_widths):
        """Fresh dropout masks for one batch, in layer order."""
        masks = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                masks[i] = layer.draw_mask((batch_size, feature_widths[i]), rng)
        return masks


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean categorical cross-entropy and its gradient w.r.t. the logits.

    The gradient is (softmax(logits) - one_hot) / batch.
    """
    probs = softmax(logits)
    n = logits.shape[0]
    picked = probs[np.arange(n), labels]
    loss = -np.log(np.maximum(picked, 1e-300)).mean()
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# specs and construction


@dataclass(frozen=True)
class NetworkSpec:
    """Topology: a conv backbone plus the fixed Dense-Dropout-Dense-Dropout-Dense head."""

    input_size: int = 32
    backbone: tuple = (("conv", 8), ("relu",), ("maxpool",),
                       ("conv", 16), ("relu",), ("maxpool",))
    head_width: int = 512

    def __post_init__(self):
        if self.input_size < 4:
            raise InvalidArgumentError("input_size must be >= 4")
        if self.head_width < 1:
            raise InvalidArgumentError("head_width must be >= 1")
        for entry in self.backbone:
            if entry[0] not in ("conv", "relu", "maxpool"):
                raise InvalidArgumentError(f"unknown backbone layer {entry!r}")

    def to_dict(self):
        return {"input_size": self.input_size,
                "backbone": [list(e) for e in self.backbone],
                "head_width": self.head_width}

    @classmethod
    def from_dict(cls, raw):
        return cls(input_size=int(raw["input_size"]),
                   backbone=tuple(tuple(e) for e in raw["backbone"]),
                   head_width=int(raw["head_width"]))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.88
    batch_size: int = 24
    max_epochs: int = 200
    patience: int = 50
    loss: str = "categorical_crossentropy"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvalidArgumentError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if self.patience > self.max_epochs:
            raise InvalidArgumentError("patience must be <= max_epochs")
        if self.loss != "categorical_crossentropy":
            raise InvalidArgumentError(f"unsupported loss {self.loss!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        return cls(**raw)


def _he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def build_network(spec: NetworkSpec, rng: np.random.Generator) -> Network:
    """Instantiate the layer stack with He-uniform weights and zero biases."""
    layers = []
    channels = 3
    side = spec.input_size
    for entry in spec.backbone:
        if entry[0] == "conv":
            c_out = int(entry[1])
            w = _he_uniform(rng, (3, 3, channels, c_out), 9 * channels)
            layers.append(Conv3x3(w, np.zeros(c_out)))
            channels = c_out
        elif entry[0] == "relu":
            layers.append(ReLU())
        else:
            layers.append(MaxPool2())
            side //= 2
    flat = side * side * channels
    layers.append(Flatten())
    widths = (spec.head_width, spec.head_width)
    fan = flat
    for width in widths:
        layers.append(Dense(_he_uniform(rng, (fan, width), fan), np.zeros(width)))
        layers.append(ReLU())
        layers.append(Dropout(_HEAD_DROPOUT))
        fan = width
    layers.append(Dense(_he_uniform(rng, (fan, len(TissueClass)), fan),
                        np.zeros(len(TissueClass))))
    return Network(layers)


def _dropout_widths(net: Network, spec_or_width) -> dict:
    """Feature width seen by each dropout layer (the preceding dense width)."""
    widths = {}
    last = None
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Dense):
            last = layer.w.shape[1]
        if isinstance(layer, Dropout):
            widths[i] = last
    return widths


@dataclass
class NetworkModel:
    """A trained network: topology, weights and the training history."""

    spec: NetworkSpec
    network: Network
    config: TrainConfig
    history: list = field(default_factory=list)  # (train_loss, val_loss) per epoch

    def predict_batch(self, x: np.ndarray):
        logits, _ = self.network.forward(x)
        scores = softmax(logits)
        return scores.argmax(axis=1), scores


# ---------------------------------------------------------------------------
# training


def patches_to_array(patches) -> np.ndarray:
    """Stack patches into an (n, s, s, 3) float64 array scaled to [0, 1]."""
    return np.stack([np.asarray(p.pixels, dtype=np.float64) / 255.0 for p in patches])


def sgd_momentum_step(params, grads, velocities, learning_rate, momentum):
    """In-place v <- momentum*v - lr*grad; w <- w + v for each parameter."""
    for p, g, v in zip(params, grads, velocities):
        v *= momentum
        v -= learning_rate * g
        p += v


def train_arrays(net: Network, config: TrainConfig, x_train, y_train,
                 x_val, y_val) -> list:
    """Run the SGD-momentum loop on prepared arrays.

    Mutates `net` in place, restores the best-validation-epoch weights and
    returns the per-epoch (train_loss, val_loss) history.  Mini-batch order
    is drawn from (seed, epoch); dropout masks from the run stream seeded by
    config.seed.
    """
    n = x_train.shape[0]
    if n == 0:
        raise TrainingError("empty training data", epoch=None)
    run_rng = np.random.default_rng(config.seed)
    params = net.parameters()
    velocities = [np.zeros_like(p) for p in params]
    widths = _dropout_widths(net, None)

    best_loss = np.inf
    best_weights = [p.copy() for p in params]
    stale = 0
    history = []
    for epoch in range(config.max_epochs):
        order = np.random.default_rng((config.seed, epoch)).permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            masks = net.draw_masks(xb.shape[0], run_rng, widths)
            logits, caches = net.forward(xb, masks)
            loss, dlogits = cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            grads = net.backward(caches, dlogits)
            sgd_momentum_step(params, grads, velocities,
                              config.learning_rate, config.momentum)
            epoch_losses.append(loss)
        val_logits, _ = net.forward(x_val)
        val_loss, _ = cross_entropy(val_logits, y_val)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        history.append((float(np.mean(epoch_losses)), float(val_loss)))
        if val_loss < best_loss - _IMPROVEMENT:
            best_loss = val_loss
            best_weights = [p.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    for p, best in zip(params, best_weights):
        p[...] = best
    return history


def train(spec: NetworkSpec, config: TrainConfig, train_data, val_data) -> NetworkModel:
    """Train the QTDU network on labeled patches.

    train_data / val_data are iterables of (Patch, label); labels may be
    TissueClass members or their integer codes.
    """
    train_pairs = list(train_data)
    val_pairs = list(val_data)
    if not train_pairs or not val_pairs:
        raise TrainingError("training and validation data must be non-empty", epoch=None)
    for patch, _ in train_pairs + val_pairs:
        if patch.height != spec.input_size or patch.width != spec.input_size:
            raise TrainingError(
                f"patch is {patch.width}x{patch.height}, spec requires "
                f"{spec.input_size}x{spec.input_size}", epoch=None)
    x_train = patches_to_array([p for p, _ in train_pairs])
    y_train = np.asarray([int(l) for _, l in train_pairs], dtype=np.int64)
    x_val = patches_to_array([p for p, _ in val_pairs])
    y_val = np.asarray([int(l) for _, l in val_pairs], dtype=np.int64)

    net = build_network(spec, np.random.default_rng(config.seed))
    history = train_arrays(net, config, x_train, y_train, x_val, y_val)
    return NetworkModel(spec=spec, network=net, config=config, history=history)


def predict(model: NetworkModel, patch: Patch):
    """Label one patch; returns (TissueClass, score vector over the 4 classes)."""
    if patch.height != model.spec.input_size or patch.width != model.spec.input_size:
        raise InvalidArgumentError(
            f"patch is {patch.width}x{patch.height}, model expects "
            f"{model.spec.input_size}x{model.spec.input_size}")
    x = patches_to_array([patch])
    _, scores = model.predict_batch(x)
    return TissueClass(int(scores[0].argmax())), scores[0]


# ---------------------------------------------------------------------------
# gradient verification


def gradient_check(spec: NetworkSpec, batch, epsilon: float = 1e-4,
                   max_samples: int = 200, seed: int = 0) -> dict:
    """Compare backprop against central finite differences.

    Dropout masks are frozen for the whole check so the loss is a pure
    function of the weights.  Returns {layer_name: max relative error} over
    up to max_samples randomly chosen weights per parameterized layer.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise InvalidArgumentError("epsilon must lie in [1e-6, 1e-3]")
    pairs = list(batch)
    x = patches_to_array([p for p, _ in pairs])
    y = np.asarray([int(l) for _, l in pairs], dtype=np.int64)
    rng = np.random.default_rng(seed)
    net = build_network(spec, rng)
    widths = _dropout_widths(net, None)
    masks = net.draw_masks(x.shape[0], rng, widths)

    def loss_value():
        logits, _ = net.forward(x, masks)
        loss, _ = cross_entropy(logits, y)
        if not np.isfinite(loss):
            raise TrainingError("non-finite loss during gradient check", epoch=None)
        return loss

    logits, caches = net.forward(x, masks)
    loss, dlogits = cross_entropy(logits, y)
    if not np.isfinite(loss):
        raise TrainingError("non-finite loss during gradient check", epoch=None)
    grads = net.backward(caches, dlogits)

    report = {}
    pi = 0
    for li, layer in enumerate(net.layers):
        if not layer.params:
            continue
        worst = 0.0
        for arr in layer.params:
            analytic = grads[pi]
            pi += 1
            flat = arr.ravel()
            n_entries = flat.shape[0]
            take = min(max_samples, n_entries)
            chosen = rng.choice(n_entries, size=take, replace=False)
            for j in chosen:
                keep = flat[j]
                flat[j] = keep + epsilon
                up = loss_value()
                flat[j] = keep - epsilon
                down = loss_value()
                flat[j] = keep
                numeric = (up - down) / (2 * epsilon)
                ga = analytic.ravel()[j]
                err = abs(ga - numeric) / max(abs(ga), abs(numeric), 1e-12)
                worst = max(worst, err)
        report[f"{layer.kind}_{li}"] = worst
    return report


# ---------------------------------------------------------------------------
# persistence: JSON header + little-endian float32 weight blob


def save_network(model: NetworkModel, path) -> None:
    header = json.dumps({
        "spec": model.spec.to_dict(),
        "config": model.config.to_dict(),
        "history": model.history,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in model.network.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_network(path) -> NetworkModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise InvalidArgumentError(f"{path}: not a network model file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        raw = json.loads(fh.read(hlen).decode("utf-8"))
        spec = NetworkSpec.from_dict(raw["spec"])
        config = TrainConfig.from_dict(raw["config"])
        net = build_network(spec, np.random.default_rng(0))
        for p in net.parameters():
            data = np.frombuffer(fh.read(p.size * 4), dtype="<f4")
            p[...] = data.reshape(p.shape).astype(np.float64)
    history = [tuple(h) for h in raw["history"]]
    return NetworkModel(spec=spec, network=net, config=config, history=history)
