"""Small NHWC classifier with hand-derived gradients.

Layers are stateless descriptions; parameters live in ``Classifier.params``
as a flat list of float64 arrays (weight then bias for every Conv/Dense).
``forward_train`` returns a tape of intermediate values that ``backward``
consumes, so neither call mutates the model.
"""

import io
import struct

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .core import softmax


class Conv:
    kind = 1

    def __init__(self, in_ch, out_ch, k=3, stride=1, pad=None):
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, k, stride
        self.pad = k // 2 if pad is None else pad

    def out_shape(self, shape):
        h, w, c = shape
        if c != self.in_ch:
            raise ValueError(f"Conv expects {self.in_ch} channels, got {c}")
        ho = (h + 2 * self.pad - self.k) // self.stride + 1
        wo = (w + 2 * self.pad - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError("Conv output would be empty")
        return (ho, wo, self.out_ch)

    def param_shapes(self):
        return [(self.k, self.k, self.in_ch, self.out_ch), (self.out_ch,)]

    def fan_in(self):
        return self.k * self.k * self.in_ch

    def fields(self):
        return (self.in_ch, self.out_ch, self.k, self.stride, self.pad)

    def _cols(self, x):
        n, h, w, c = x.shape
        k, s, p = self.k, self.stride, self.pad
        ho, wo, _ = self.out_shape((h, w, c))
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else np.ascontiguousarray(x)
        sn, sh, sw, sc = xp.strides
        win = as_strided(xp, (n, ho, wo, k, k, c), (sn, s * sh, s * sw, sh, sw, sc), writeable=False)
        return win.reshape(n * ho * wo, k * k * c), (n, ho, wo)

    def forward(self, x, params, need_cache):
        wgt, b = params
        cols, (n, ho, wo) = self._cols(x)
        out = cols @ wgt.reshape(-1, self.out_ch)
        out += b
        return out.reshape(n, ho, wo, self.out_ch), ((cols, x.shape) if need_cache else None)

    def backward(self, cache, dout, params, need_dx):
        cols, xshape = cache
        wgt, _ = params
        d2 = dout.reshape(-1, self.out_ch)
        dw = (cols.T @ d2).reshape(wgt.shape)
        db = d2.sum(axis=0)
        if not need_dx:
            return None, [dw, db]
        n, h, w, c = xshape
        k, s, p = self.k, self.stride, self.pad
        _, ho, wo, _ = dout.shape
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c))
        for dy in range(k):
            for dx in range(k):
                slab = (d2 @ wgt[dy, dx].T).reshape(n, ho, wo, c)
                dxp[:, dy:dy + s * (ho - 1) + 1:s, dx:dx + s * (wo - 1) + 1:s, :] += slab
        return dxp[:, p:p + h, p:p + w, :], [dw, db]

    def __repr__(self):
        return f"Conv({self.in_ch}->{self.out_ch}, k={self.k}, stride={self.stride})"


class Dense:
    kind = 2

    def __init__(self, n_in, n_out):
        self.n_in, self.n_out = n_in, n_out

    def out_shape(self, shape):
        if shape != (self.n_in,):
            raise ValueError(f"Dense expects ({self.n_in},), got {shape}")
        return (self.n_out,)

    def param_shapes(self):
        return [(self.n_in, self.n_out), (self.n_out,)]

    def fan_in(self):
        return self.n_in

    def fields(self):
        return (self.n_in, self.n_out)

    def forward(self, x, params, need_cache):
        wgt, b = params
        return x @ wgt + b, (x if need_cache else None)

    def backward(self, x, dout, params, need_dx):
        wgt, _ = params
        grads = [x.T @ dout, dout.sum(axis=0)]
        return (dout @ wgt.T if need_dx else None), grads

    def __repr__(self):
        return f"Dense({self.n_in}->{self.n_out})"


class _Stateless:
    def param_shapes(self):
        return []

    def fields(self):
        return ()

    def __repr__(self):
        return f"{type(self).__name__}()"


class ReLU(_Stateless):
    kind = 3

    def out_shape(self, shape):
        return shape

    def forward(self, x, params, need_cache):
        mask = x > 0 if need_cache else None
        return np.maximum(x, 0.0, out=x), mask

    def backward(self, mask, dout, params, need_dx):
        return dout * mask, []


class GlobalAvgPool(_Stateless):
    kind = 4

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ValueError("GlobalAvgPool expects an (H, W, C) input")
        return (shape[2],)

    def forward(self, x, params, need_cache):
        return x.mean(axis=(1, 2)), (x.shape if need_cache else None)

    def backward(self, shape, dout, params, need_dx):
        n, h, w, c = shape
        return np.broadcast_to(dout[:, None, None, :] / (h * w), shape), []


class Flatten(_Stateless):
    kind = 5

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, params, need_cache):
        return x.reshape(len(x), -1), (x.shape if need_cache else None)

    def backward(self, shape, dout, params, need_dx):
        return dout.reshape(shape), []


LAYER_TYPES = {cls.kind: cls for cls in (Conv, Dense, ReLU, GlobalAvgPool, Flatten)}


class Classifier:
    def __init__(self, layers, input_shape, params=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if len(shape) != 1:
            raise ValueError(f"network must end in a vector, got shape {shape}")
        self.num_classes = shape[0]
        self._slices = []
        pos = 0
        for layer in self.layers:
            n = len(layer.param_shapes())
            self._slices.append(slice(pos, pos + n))
            pos += n
        shapes = [s for layer in self.layers for s in layer.param_shapes()]
        if params is None:
            params = [np.zeros(s) for s in shapes]
        if [p.shape for p in params] != [tuple(s) for s in shapes]:
            raise ValueError("parameter shapes do not match the layer stack")
        self.params = [np.asarray(p, dtype=np.float64) for p in params]

    def init(self, rng, gain=np.sqrt(2.0)):
        """He-style init: weights ~ N(0, gain^2 / fan_in), zero biases."""
        params = []
        for layer in self.layers:
            shapes = layer.param_shapes()
            if shapes:
                std = gain / np.sqrt(layer.fan_in())
                params.append(rng.standard_normal(shapes[0]) * std)
                params.append(np.zeros(shapes[1]))
        self.params = params
        return self

    def with_params(self, params):
        return Classifier(self.layers, self.input_shape, [np.array(p) for p in params])

    def copy(self):
        return self.with_params(self.params)

    def num_params(self):
        return sum(p.size for p in self.params)

    def _check_input(self, x):
        # copied: ReLU works in place on its input
        x = np.array(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"batch shape {x.shape} does not match input {self.input_shape}")
        return x

    def forward(self, x):
        x = self._check_input(x)
        for layer, sl in zip(self.layers, self._slices):
            x, _ = layer.forward(x, self.params[sl], False)
        return x

    def forward_train(self, x):
        x = self._check_input(x)
        tape = []
        for layer, sl in zip(self.layers, self._slices):
            x, cache = layer.forward(x, self.params[sl], True)
            tape.append(cache)
        return x, tape

    def backward(self, tape, dlogits):
        dout = np.asarray(dlogits, dtype=np.float64)
        if dout.shape[1:] != (self.num_classes,):
            raise ValueError(f"upstream gradient shape {dout.shape} is not [N, {self.num_classes}]")
        grads = [None] * len(self.params)
        for i in range(len(self.layers) - 1, -1, -1):
            layer, sl = self.layers[i], self._slices[i]
            dout, g = layer.backward(tape[i], dout, self.params[sl], i > 0)
            grads[sl] = g
        return grads

    def __repr__(self):
        return f"Classifier({self.input_shape}, {self.layers})"


def reference_classifier(input_shape, num_classes, widths=(16, 32)):
    """Conv3x3(16)-ReLU-Conv3x3(32, stride 2)-ReLU-GlobalAvgPool-Dense(L)."""
    c = input_shape[2]
    w1, w2 = widths
    layers = [Conv(c, w1, 3, 1), ReLU(), Conv(w1, w2, 3, 2), ReLU(), GlobalAvgPool(), Dense(w2, num_classes)]
    return Classifier(layers, input_shape)


def images_to_tensor(imgs):
    """Map uint8 pixels to roughly unit-scale float64 inputs."""
    return (np.asarray(imgs, dtype=np.float64) - 127.5) / 64.0


def forward(model, batch):
    return model.forward(batch)


def predict_dist(model, batch):
    return softmax(model.forward(batch))


def backward(model, batch, loss_grad_on_logits):
    _, tape = model.forward_train(batch)
    return model.backward(tape, loss_grad_on_logits)


def ce_loss_and_grads(model, batch, targets):
    """Mean cross-entropy against (soft) targets, with parameter gradients."""
    logits, tape = model.forward_train(batch)
    p = softmax(logits)
    n = len(batch)
    loss = float(-(targets * np.log(np.maximum(p, 1e-12))).sum() / n)
    grads = model.backward(tape, (p * targets.sum(axis=1, keepdims=True) - targets) / n)
    return loss, grads, p


def _relu_signature(tape, model):
    return [c for c, layer in zip(tape, model.layers) if isinstance(layer, ReLU)]


def grad_check(model, batch, eps=1e-5, labels=None, rng=None, rel_floor=1e-6):
    """Largest relative error between backprop and central differences.

    The scalar checked is the mean cross-entropy against ``labels`` (random
    when omitted). Relative error is ``|a - n| / max(|a|, |n|, rel_floor)``.
    Coordinates where a ReLU changes state between the two perturbed
    evaluations straddle a kink, have no classical derivative, and are
    skipped; the count is returned alongside the error.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    batch = np.asarray(batch, dtype=np.float64)
    if labels is None:
        rng = rng or np.random.default_rng(0)
        labels = rng.integers(0, model.num_classes, size=len(batch))
    targets = np.eye(model.num_classes)[labels]
    _, analytic, _ = ce_loss_and_grads(model, batch, targets)

    def loss_at():
        logits, tape = model.forward_train(batch)
        p = softmax(logits)
        return -(targets * np.log(np.maximum(p, 1e-300))).sum() / len(batch), _relu_signature(tape, model)

    worst, skipped = 0.0, 0
    for p, g in zip(model.params, analytic):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus, sig_plus = loss_at()
            flat[j] = orig - eps
            f_minus, sig_minus = loss_at()
            flat[j] = orig
            if any(not np.array_equal(a, b) for a, b in zip(sig_plus, sig_minus)):
                skipped += 1
                continue
            num = (f_plus - f_minus) / (2 * eps)
            err = abs(gflat[j] - num) / max(abs(gflat[j]), abs(num), rel_floor)
            worst = max(worst, err)
    return worst, skipped


def random_architecture(rng):
    """A small random layer stack for gradient checking."""
    h = int(rng.integers(4, 9))
    w = int(rng.integers(4, 9))
    c = int(rng.integers(1, 4))
    layers, shape = [], (h, w, c)
    for _ in range(int(rng.integers(1, 3))):
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        out = int(rng.integers(1, 5))
        conv = Conv(shape[2], out, k, stride)
        layers += [conv, ReLU()]
        shape = conv.out_shape(shape)
    if rng.random() < 0.5:
        layers.append(GlobalAvgPool())
        feat = shape[2]
    else:
        layers.append(Flatten())
        feat = int(np.prod(shape))
    if rng.random() < 0.5:
        hidden = int(rng.integers(2, 6))
        layers += [Dense(feat, hidden), ReLU()]
        feat = hidden
    layers.append(Dense(feat, int(rng.integers(2, 6))))
    return Classifier(layers, (h, w, c))


# -- checkpoint format ---------------------------------------------------------------
#
# Little-endian throughout:
#   magic  b"FXNET\x00\x00\x01"
#   u32    format version (1)
#   u32 x3 input height, width, channels
#   u32    number of layers, then per layer: u32 type code, u32 field
#          count, u32 fields (Conv: in, out, k, stride, pad; Dense: in, out)
#   u32    number of parameter arrays, then per array: u32 ndim, u32 dims
#   raw float64 parameter blocks in the same order

MAGIC = b"FXNET\x00\x00\x01"
VERSION = 1


def model_to_bytes(model):
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<3I", *model.input_shape))
    out.write(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        fields = layer.fields()
        out.write(struct.pack("<II", layer.kind, len(fields)))
        out.write(struct.pack(f"<{len(fields)}I", *fields))
    out.write(struct.pack("<I", len(model.params)))
    for p in model.params:
        out.write(struct.pack("<I", p.ndim))
        out.write(struct.pack(f"<{p.ndim}I", *p.shape))
    for p in model.params:
        out.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return out.getvalue()


def model_from_bytes(buf):
    view = memoryview(buf)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise ValueError("truncated model checkpoint")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    if bytes(view[:8]) != MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    pos = 8
    (version,) = take("<I")
    if version != VERSION:
        raise ValueError(f"unsupported model checkpoint version {version}")
    input_shape = take("<3I")
    (n_layers,) = take("<I")
    layers = []
    for _ in range(n_layers):
        kind, nfields = take("<II")
        fields = take(f"<{nfields}I")
        if kind not in LAYER_TYPES:
            raise ValueError(f"unknown layer type code {kind}")
        layers.append(LAYER_TYPES[kind](*fields))
    (n_params,) = take("<I")
    shapes = []
    for _ in range(n_params):
        (ndim,) = take("<I")
        shapes.append(take(f"<{ndim}I"))
    params = []
    for shape in shapes:
        count = int(np.prod(shape))
        if pos + 8 * count > len(view):
            raise ValueError("truncated model checkpoint")
        params.append(np.frombuffer(view, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape))
        pos += 8 * count
    if pos != len(view):
        raise ValueError("trailing bytes in model checkpoint")
    return Classifier(layers, input_shape, params)


def save_model(model, path):
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path):
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
