"""Small convolutional network producing an 18-value structural signature.

The network maps a 20x20 patch through three valid convolutions with ReLU
(average pooling after the first two) to an 18-vector, followed by an affine
softmax head over {background, foreground}. The 18-vector feeding the head is
the signature.

Everything is plain numpy in float64 so that gradients can be checked
against finite differences.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, DegenerateDataError, ShapeError

PATCH_SIZE = 20
SIGNATURE_LENGTH = 18
# (n_maps, kernel side, pool after)
DEFAULT_ARCHITECTURE = ((4, 5, True), (6, 5, True), (SIGNATURE_LENGTH, 2, False))

SNET_MAGIC = b"SNET"
SNET_VERSION = 1


def relu(x):
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ConvLayer:
    W: np.ndarray  # (n_maps, in_maps, k, k)
    b: np.ndarray  # (n_maps,)
    pool: bool = False

    @property
    def n_maps(self) -> int:
        return self.W.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.W.shape[2], self.W.shape[3]


@dataclass
class SignatureNet:
    layers: list[ConvLayer]
    W_out: np.ndarray  # (2, signature length)
    b_out: np.ndarray  # (2,)
    input_size: int = PATCH_SIZE
    meta: dict = field(default_factory=dict)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out + [self.W_out, self.b_out]

    def copy(self) -> "SignatureNet":
        return SignatureNet([ConvLayer(l.W.copy(), l.b.copy(), l.pool) for l in self.layers],
                            self.W_out.copy(), self.b_out.copy(), self.input_size, dict(self.meta))

    @property
    def signature_length(self) -> int:
        return self.W_out.shape[1]


def _glorot(rng, shape, fan_in, fan_out):
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


def init_net(seed=0, architecture=DEFAULT_ARCHITECTURE, input_size: int = PATCH_SIZE,
             n_classes: int = 2) -> SignatureNet:
    rng = np.random.default_rng(seed)
    layers = []
    in_maps, side = 1, input_size
    for n_maps, k, pool in architecture:
        side = side - k + 1
        if side < 1 or (pool and side % 2):
            raise ConfigError(f"architecture does not fit a {input_size}x{input_size} input")
        W = _glorot(rng, (n_maps, in_maps, k, k), in_maps * k * k, n_maps * k * k)
        layers.append(ConvLayer(W, np.zeros(n_maps), pool))
        in_maps = n_maps
        if pool:
            side //= 2
    if side != 1:
        raise ConfigError(f"architecture leaves a {side}x{side} map; the signature needs 1x1")
    W_out = _glorot(rng, (n_classes, in_maps), in_maps, n_classes)
    return SignatureNet(layers, W_out, np.zeros(n_classes), input_size)


# --------------------------------------------------------------------------
# forward / backward

def _conv(x, W, b):
    k = W.shape[2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # n c h w i j
    z = np.tensordot(win, W, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return z + b[None, :, None, None], win


def _conv_backward(dz, win, W, x_shape, need_dx=True):
    k = W.shape[2]
    dW = np.tensordot(dz, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dz.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dW, db
    padded = np.pad(dz, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    dwin = sliding_window_view(padded, (k, k), axis=(2, 3))
    dx = np.tensordot(dwin, W[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    assert dx.shape == x_shape
    return dx, dW, db


def _pool(a):
    n, c, h, w = a.shape
    return a.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _unpool(d):
    return np.repeat(np.repeat(d, 2, axis=2), 2, axis=3) * 0.25


def _as_batch(net: SignatureNet, patches) -> np.ndarray:
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    s = net.input_size
    if x.ndim != 3 or x.shape[1:] != (s, s):
        raise ShapeError(f"expected {s}x{s} patches, got shape {np.shape(patches)}")
    return x[:, None]


def _forward(net, x, keep=False):
    cache = []
    a = x
    for layer in net.layers:
        z, win = _conv(a, layer.W, layer.b)
        r = relu(z)
        out = _pool(r) if layer.pool else r
        if keep:
            cache.append((a.shape, win, z))
        a = out
    sig = a.reshape(a.shape[0], -1)
    logits = sig @ net.W_out.T + net.b_out
    return sig, logits, cache


def forward_batch(net: SignatureNet, patches, chunk: int = 2048):
    """Signatures and class probabilities for a stack of patches."""
    x = _as_batch(net, patches)
    sigs, probs = [], []
    for start in range(0, x.shape[0], chunk):
        sig, logits, _ = _forward(net, x[start:start + chunk])
        sigs.append(sig)
        probs.append(softmax(logits))
    if not sigs:
        return np.zeros((0, net.signature_length)), np.zeros((0, net.W_out.shape[0]))
    return np.concatenate(sigs), np.concatenate(probs)


def forward(net: SignatureNet, patch):
    """``(signature, probs)`` for a single patch."""
    patch = np.asarray(patch)
    if patch.shape != (net.input_size, net.input_size):
        raise ShapeError(f"expected a {net.input_size}x{net.input_size} patch, got {patch.shape}")
    sig, probs = forward_batch(net, patch[None])
    return sig[0], probs[0]


def loss_and_grads(net: SignatureNet, patches, labels):
    """Mean cross-entropy over the batch and its gradient for every parameter.

    Gradients come back in the order of :meth:`SignatureNet.params`.
    """
    x = _as_batch(net, patches)
    y = np.asarray(labels, dtype=np.int64).ravel()
    n = x.shape[0]
    sig, logits, cache = _forward(net, x, keep=True)
    p = softmax(logits)
    loss = -np.mean(np.log(np.clip(p[np.arange(n), y], 1e-300, None)))

    dlogits = p.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    dW_out = dlogits.T @ sig
    db_out = dlogits.sum(axis=0)
    da = (dlogits @ net.W_out).reshape(n, -1, 1, 1)

    grads = [dW_out, db_out]
    depth = len(net.layers)
    for i, layer, (in_shape, win, z) in zip(range(depth - 1, -1, -1), reversed(net.layers),
                                           reversed(cache)):
        if layer.pool:
            da = _unpool(da)
        dz = da * (z > 0)
        # the input patch needs no gradient
        da, dW, db = _conv_backward(dz, win, layer.W, in_shape, need_dx=i > 0)
        grads = [dW, db] + grads
    return loss, grads


# --------------------------------------------------------------------------
# training and verification

def train(net: SignatureNet, patches, labels, epochs: int = 10, lr: float = 0.01,
          seed=0, batch_size: int = 32):
    """Mini-batch SGD on cross-entropy.

    Returns a trained copy of ``net`` and the mean loss of each epoch. The
    input net is left untouched.
    """
    x = np.asarray(patches, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).ravel()
    if x.shape[0] != y.shape[0]:
        raise DataError("patches and labels differ in length")
    if np.unique(y).size < 2:
        raise DegenerateDataError("training data contains a single class")
    net = net.copy()
    rng = np.random.default_rng(seed)
    trace = []
    for _ in range(int(epochs)):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_grads(net, x[idx], y[idx])
            total += loss * len(idx)
            if lr:
                for param, g in zip(net.params(), grads):
                    param -= lr * g
        trace.append(total / len(y))
    return net, np.asarray(trace)


def accuracy(net: SignatureNet, patches, labels) -> float:
    _, probs = forward_batch(net, patches)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(labels).ravel()))


def kink_margin(net: SignatureNet, patch) -> float:
    """Smallest |pre-activation| over all ReLUs for ``patch``."""
    _, _, cache = _forward(net, _as_batch(net, patch), keep=True)
    return float(min(np.abs(z).min() for _, _, z in cache))


def gradient_check(net: SignatureNet, patch, label: int, step: float = 1e-4) -> float:
    """Largest relative gap between backprop and central finite differences.

    Relative error per parameter is ``|g_a - g_n| / max(|g_a|, |g_n|, 1e-7)``.
    """
    patch = np.asarray(patch, dtype=np.float64)[None]
    label = np.asarray([label])
    _, analytic = loss_and_grads(net, patch, label)
    probe = net.copy()
    worst = 0.0
    for param, g in zip(probe.params(), analytic):
        flat = param.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = _loss_only(probe, patch, label)
            flat[i] = orig - step
            lm, _ = _loss_only(probe, patch, label)
            flat[i] = orig
            numeric = (lp - lm) / (2 * step)
            denom = max(abs(gflat[i]), abs(numeric), 1e-7)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst


def _loss_only(net, patch, label):
    _, logits, _ = _forward(net, patch[:, None])
    p = softmax(logits)
    return -np.log(p[0, label[0]]), p


# --------------------------------------------------------------------------
# SNET checkpoints

def save_net(path, net: SignatureNet) -> None:
    """Write a checkpoint: header, then each array as rank, dims, f64 payload."""
    arrays = net.params()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", SNET_MAGIC, SNET_VERSION, net.input_size, len(net.layers)))
        fh.write(bytes(int(l.pool) for l in net.layers))
        for arr in arrays:
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_net(path) -> SignatureNet:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such checkpoint: {path}")
    buf = memoryview(path.read_bytes())
    try:
        magic, version, input_size, n_layers = struct.unpack_from("<4sIII", buf, 0)
        if magic != SNET_MAGIC or version != SNET_VERSION:
            raise DataError(f"{path}: not an SNET v{SNET_VERSION} checkpoint")
        pos = 16
        pools = [bool(b) for b in buf[pos:pos + n_layers]]
        pos += n_layers
        arrays = []
        for _ in range(2 * n_layers + 2):
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            count = int(np.prod(shape))
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
            arrays.append(arr.astype(np.float64))
            pos += 8 * count
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated checkpoint") from exc
    layers = [ConvLayer(arrays[2 * i], arrays[2 * i + 1], pools[i]) for i in range(n_layers)]
    return SignatureNet(layers, arrays[-2], arrays[-1], input_size)
