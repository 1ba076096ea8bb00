"""Layered feed-forward victim models: forward with activation traces,
manual backprop for weight and input gradients, a small deterministic
trainer, and the QNET1 binary model format.

Layer kinds are dense, conv2d (executed through im2col so the same
input-outer-product Hessian applies to both), relu, and flatten. Conv
weights have shape (o, c, kh, kw); dense weights (out, in). Biases stay
full precision everywhere in this package.
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FormatError, NumericError
from .optim import Adam
from .tensor_ops import (
    col2im,
    conv_output_size,
    im2col,
    matmul,
    relu_backward,
    relu_forward,
    softmax_cross_entropy_batch,
)

WEIGHTED_KINDS = ("dense", "conv2d")
KIND_TAGS = {"dense": 0, "conv2d": 1, "relu": 2, "flatten": 3}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}

MAGIC = b"QNET1"
VERSION = 1


@dataclass
class Layer:
    kind: str
    weights: np.ndarray = None
    bias: np.ndarray = None
    stride: int = 1
    pad: int = 0

    @property
    def weighted(self):
        return self.kind in WEIGHTED_KINDS

    def copy(self):
        return Layer(
            self.kind,
            None if self.weights is None else self.weights.copy(),
            None if self.bias is None else self.bias.copy(),
            self.stride,
            self.pad,
        )


def dense(weights, bias=None):
    w = np.asarray(weights, dtype=np.float64)
    b = np.zeros(w.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    return Layer("dense", w, b)


def conv2d(weights, bias=None, stride=1, pad=0):
    w = np.asarray(weights, dtype=np.float64)
    b = np.zeros(w.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    return Layer("conv2d", w, b, stride, pad)


def relu():
    return Layer("relu")


def flatten():
    return Layer("flatten")


@dataclass
class Model:
    layers: list
    input_shape: tuple
    num_classes: int

    def copy(self):
        return Model([l.copy() for l in self.layers], tuple(self.input_shape), self.num_classes)

    def weighted_indices(self):
        return [i for i, l in enumerate(self.layers) if l.weighted]

    def validate(self):
        if not any(l.weighted for l in self.layers):
            raise DimensionError("model has no weighted layers")
        shapes = layer_shapes(self.layers, self.input_shape)
        out = shapes[-1]
        if out != (self.num_classes,):
            raise DimensionError(f"model output shape {out} != ({self.num_classes},)")
        for l in self.layers:
            if l.weighted and not np.all(np.isfinite(l.weights)):
                raise NumericError("non-finite weights in model")
        return self


def layer_shapes(layers, input_shape):
    """Propagate a (batchless) input shape through the stack.

    Returns the output shape after every layer; raises DimensionError when
    consecutive layers do not compose.
    """
    shape = tuple(int(d) for d in input_shape)
    out = []
    for i, l in enumerate(layers):
        if l.kind == "dense":
            if len(shape) != 1 or shape[0] != l.weights.shape[1]:
                raise DimensionError(f"layer {i}: dense expects ({l.weights.shape[1]},), got {shape}")
            shape = (l.weights.shape[0],)
        elif l.kind == "conv2d":
            o, c, kh, kw = l.weights.shape
            if len(shape) != 3 or shape[0] != c:
                raise DimensionError(f"layer {i}: conv expects ({c},h,w), got {shape}")
            oh, ow = conv_output_size(shape[1], shape[2], kh, kw, l.stride, l.pad)
            shape = (o, oh, ow)
        elif l.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif l.kind == "relu":
            pass
        else:
            raise DimensionError(f"unknown layer kind {l.kind!r}")
        out.append(shape)
    return out


@dataclass
class ForwardTrace:
    """Per-layer inputs captured during one forward pass.

    entries[i] holds what layer i consumed: for weighted layers the
    (in_features, columns) matrix that multiplied the weights (the im2col
    patch matrix for conv), for relu the raw pre-activation, for flatten
    the input shape.
    """

    entries: list = field(default_factory=list)
    logits: np.ndarray = None

    def weighted_inputs(self, model):
        return [self.entries[i]["x_matrix"] for i in model.weighted_indices()]


def forward(model: Model, batch: np.ndarray):
    """Run a batch (B, *input_shape) through the model.

    Returns (logits (B, num_classes), ForwardTrace).
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise DimensionError(f"batch shape {x.shape[1:]} != model input {model.input_shape}")
    bsz = x.shape[0]
    trace = ForwardTrace()
    for l in model.layers:
        if l.kind == "dense":
            xmat = np.ascontiguousarray(x.T)
            z = matmul(l.weights, xmat) + l.bias[:, None]
            trace.entries.append({"kind": "dense", "x_matrix": xmat})
            x = z.T
        elif l.kind == "conv2d":
            o, c, kh, kw = l.weights.shape
            in_shape = x.shape
            patches, (oh, ow) = im2col(x, kh, kw, l.stride, l.pad)
            z = matmul(l.weights.reshape(o, c * kh * kw), patches) + l.bias[:, None]
            trace.entries.append(
                {"kind": "conv2d", "x_matrix": patches, "in_shape": in_shape, "out_hw": (oh, ow)}
            )
            x = z.reshape(o, bsz, oh, ow).transpose(1, 0, 2, 3)
        elif l.kind == "relu":
            trace.entries.append({"kind": "relu", "x": x})
            x = relu_forward(x)
        elif l.kind == "flatten":
            trace.entries.append({"kind": "flatten", "in_shape": x.shape})
            x = x.reshape(bsz, -1)
        else:
            raise DimensionError(f"unknown layer kind {l.kind!r}")
    trace.logits = x
    return x, trace


def backward_from_logits(model: Model, trace: ForwardTrace, dlogits: np.ndarray):
    """Backpropagate a gradient at the logits to weights and input.

    Returns ({weighted layer index: (dW, db)}, dinput).
    """
    g = np.asarray(dlogits, dtype=np.float64)
    bsz = g.shape[0]
    grads = {}
    for i in range(len(model.layers) - 1, -1, -1):
        l = model.layers[i]
        entry = trace.entries[i]
        if l.kind == "dense":
            gt = np.ascontiguousarray(g.T)
            dw = matmul(gt, entry["x_matrix"].T)
            db = gt.sum(axis=1)
            grads[i] = (dw, db)
            g = matmul(l.weights.T, gt).T
        elif l.kind == "conv2d":
            o, c, kh, kw = l.weights.shape
            oh, ow = entry["out_hw"]
            gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3).reshape(o, bsz * oh * ow))
            dw = matmul(gmat, entry["x_matrix"].T).reshape(l.weights.shape)
            db = gmat.sum(axis=1)
            grads[i] = (dw, db)
            dpatches = matmul(l.weights.reshape(o, c * kh * kw).T, gmat)
            g = col2im(dpatches, entry["in_shape"], kh, kw, l.stride, l.pad)
        elif l.kind == "relu":
            g = relu_backward(entry["x"], g)
        elif l.kind == "flatten":
            g = g.reshape(entry["in_shape"])
    return grads, g


def _as_targets(targets, bsz):
    t = np.asarray(targets, dtype=np.int64)
    if t.ndim == 0:
        t = np.full(bsz, int(t), dtype=np.int64)
    if t.shape != (bsz,):
        raise DimensionError(f"expected {bsz} targets, got shape {t.shape}")
    return t


def backward_weights(model: Model, batch: np.ndarray, targets):
    """Mean-over-batch cross-entropy gradients for every weighted layer.

    Returns a list of (dW, db) in weighted-layer order.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    logits, trace = forward(model, batch)
    t = _as_targets(targets, batch.shape[0])
    _, dlogits = softmax_cross_entropy_batch(logits, t)
    grads, _ = backward_from_logits(model, trace, dlogits)
    return [grads[i] for i in model.weighted_indices()]


def backward_input(model: Model, batch: np.ndarray, targets):
    """Gradient of the mean cross-entropy with respect to the input batch."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    logits, trace = forward(model, batch)
    t = _as_targets(targets, batch.shape[0])
    _, dlogits = softmax_cross_entropy_batch(logits, t)
    _, dinput = backward_from_logits(model, trace, dlogits)
    return dinput


def batch_loss(model: Model, batch: np.ndarray, targets):
    logits, _ = forward(model, batch)
    t = _as_targets(targets, batch.shape[0])
    loss, _ = softmax_cross_entropy_batch(logits, t)
    return loss


def train_model(model: Model, dataset, epochs: int, lr: float, seed: int,
                batch_size: int = 64, optimizer: str = "adam"):
    """Train a copy of the model by minibatch gradient descent.

    `dataset` is anything with .images (n, *input_shape) and .labels (n,);
    a plain (images, labels) tuple also works. Deterministic: a fixed seed
    reproduces the returned weights bit for bit. Returns (trained model,
    per-epoch mean training loss).
    """
    if hasattr(dataset, "images"):
        images, labels = dataset.images, dataset.labels
    else:
        images, labels = dataset
    images = np.asarray(images, dtype=np.float64)
    if labels is None or len(images) == 0:
        raise ValueError("training requires a non-empty labeled dataset")
    labels = np.asarray(labels, dtype=np.int64)

    trained = model.copy()
    if epochs == 0:
        return trained, []
    widx = trained.weighted_indices()
    params = []
    for i in widx:
        params.extend([trained.layers[i].weights, trained.layers[i].bias])
    adam = Adam([p.shape for p in params], lr) if optimizer == "adam" else None

    rng = np.random.default_rng(seed)
    n = len(images)
    epoch_losses = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        running = 0.0
        nb = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = images[idx], labels[idx]
            logits, trace = forward(trained, xb)
            loss, dlogits = softmax_cross_entropy_batch(logits, yb)
            if not np.isfinite(loss):
                raise NumericError("training loss diverged", step=step)
            grads, _ = backward_from_logits(trained, trace, dlogits)
            flat_grads = []
            for i in widx:
                flat_grads.extend(grads[i])
            if adam is not None:
                params = adam.step(params, flat_grads)
            else:
                params = [p - lr * g for p, g in zip(params, flat_grads)]
            for j, i in enumerate(widx):
                trained.layers[i].weights = params[2 * j]
                trained.layers[i].bias = params[2 * j + 1]
            running += loss
            nb += 1
            step += 1
        epoch_losses.append(running / nb)
    return trained, epoch_losses


def make_victim_cnn(input_shape=(1, 16, 16), num_classes=4, seed=0,
                    conv_channels=(8, 16), hidden=32):
    """Small conv-relu-conv-relu-flatten-dense-relu-dense classifier.

    4x4 stride-2 convolutions tile power-of-two inputs exactly, halving
    the spatial size twice before the dense head.
    """
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    c1, c2 = conv_channels

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    layers = [
        conv2d(he((c1, c, 4, 4), c * 16), stride=2, pad=1),
        relu(),
        conv2d(he((c2, c1, 4, 4), c1 * 16), stride=2, pad=1),
        relu(),
        flatten(),
    ]
    oh, ow = h // 4, w // 4
    layers += [
        dense(he((hidden, c2 * oh * ow), c2 * oh * ow)),
        relu(),
        dense(he((num_classes, hidden), hidden)),
    ]
    return Model(layers, tuple(input_shape), num_classes).validate()


# --- QNET1 serialization ------------------------------------------------
#
# magic "QNET1" | u8 version | u32 layer count | per layer:
#   u8 kind tag (0 dense, 1 conv2d, 2 relu, 3 flatten)
#   kind dims as u32: dense out,in; conv2d o,c,kh,kw,stride,pad,in_h,in_w
#   f32 weights row-major, then f32 biases
# All integers little-endian. relu/flatten carry no dims or payload.


def save_model(model: Model, path):
    model.validate()
    shapes = [tuple(model.input_shape)] + layer_shapes(model.layers, model.input_shape)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    buf.write(struct.pack("<I", len(model.layers)))
    for i, l in enumerate(model.layers):
        buf.write(struct.pack("<B", KIND_TAGS[l.kind]))
        if l.kind == "dense":
            out_dim, in_dim = l.weights.shape
            buf.write(struct.pack("<II", out_dim, in_dim))
        elif l.kind == "conv2d":
            o, c, kh, kw = l.weights.shape
            in_h, in_w = shapes[i][1], shapes[i][2]
            buf.write(struct.pack("<IIIIIIII", o, c, kh, kw, l.stride, l.pad, in_h, in_w))
        if l.weighted:
            buf.write(l.weights.astype("<f4").tobytes(order="C"))
            buf.write(l.bias.astype("<f4").tobytes(order="C"))
    data = buf.getvalue()
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", offset=self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def f32s(self, count, what):
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def load_model(path) -> Model:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(5, "magic") != MAGIC:
        raise FormatError("bad magic, expected QNET1", offset=0)
    version = r.take(1, "version")[0]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=5)
    count = r.u32("layer count")
    if count == 0 or count > 10_000:
        raise FormatError(f"implausible layer count {count}", offset=6)
    layers = []
    first_conv_hw = None
    for i in range(count):
        tag = r.take(1, f"layer {i} kind")[0]
        if tag not in TAG_KINDS:
            raise FormatError(f"unknown layer kind tag {tag}", offset=r.pos - 1)
        kind = TAG_KINDS[tag]
        if kind == "dense":
            out_dim = r.u32(f"layer {i} out")
            in_dim = r.u32(f"layer {i} in")
            w = r.f32s(out_dim * in_dim, f"layer {i} weights").reshape(out_dim, in_dim)
            b = r.f32s(out_dim, f"layer {i} bias")
            layers.append(Layer("dense", w, b))
        elif kind == "conv2d":
            o, c, kh, kw, stride, pad, in_h, in_w = (r.u32(f"layer {i} dims") for _ in range(8))
            w = r.f32s(o * c * kh * kw, f"layer {i} weights").reshape(o, c, kh, kw)
            b = r.f32s(o, f"layer {i} bias")
            layers.append(Layer("conv2d", w, b, stride, pad))
            if first_conv_hw is None and all(not l.weighted for l in layers[:-1]):
                first_conv_hw = (in_h, in_w)
        else:
            layers.append(Layer(kind))
    if r.pos != len(data):
        raise FormatError(
            f"declared layer count {count} but {len(data) - r.pos} trailing bytes remain",
            offset=r.pos,
        )
    widx = [i for i, l in enumerate(layers) if l.weighted]
    if not widx:
        raise FormatError("file contains no weighted layers", offset=len(data))
    first = layers[widx[0]]
    if first.kind == "conv2d" and first_conv_hw is not None:
        input_shape = (first.weights.shape[1], first_conv_hw[0], first_conv_hw[1])
    else:
        input_shape = (first.weights.shape[1],)
    num_classes = layers[widx[-1]].weights.shape[0]
    model = Model(layers, input_shape, num_classes)
    try:
        model.validate()
    except (DimensionError, NumericError) as exc:
        raise FormatError(f"file decodes to an inconsistent model: {exc}", offset=len(data))
    return model
