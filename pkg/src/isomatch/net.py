"""Residual fully-connected descriptor network with analytic gradients.

Each block computes y = x + ELU(x W + b) (one dense layer per block, alpha=1
ELU). The default configuration is 7 blocks of width 352, matching the SHOT
input width; the network is pointwise, so rows (vertices) never interact.
Gradients are hand-written reverse mode; no autograd framework is involved.
"""

import struct

import numpy as np

from .errors import DataError

_NET_MAGIC = b"ISONET01"
_NET_VERSION = 1
# dense layers per residual block, recorded in checkpoints so a future
# two-layer variant stays distinguishable
_BLOCK_FORM = 1

DEFAULT_WIDTH = 352
DEFAULT_DEPTH = 7


class NetParams:
    """Weights and biases per block, plus ADAM moment buffers and a step
    counter (owned by the training loop, zero until then)."""

    __slots__ = ("weights", "biases", "m_w", "v_w", "m_b", "v_b", "step")

    def __init__(self, weights, biases, m_w=None, v_w=None, m_b=None, v_b=None,
                 step=0):
        if len(weights) != len(biases):
            raise DataError("weights/biases block count mismatch")
        self.weights = list(weights)
        self.biases = list(biases)
        zeros = lambda arrs: [np.zeros_like(a) for a in arrs]
        self.m_w = list(m_w) if m_w is not None else zeros(weights)
        self.v_w = list(v_w) if v_w is not None else zeros(weights)
        self.m_b = list(m_b) if m_b is not None else zeros(biases)
        self.v_b = list(v_b) if v_b is not None else zeros(biases)
        self.step = int(step)

    @property
    def depth(self):
        return len(self.weights)

    @property
    def width(self):
        return self.weights[0].shape[0]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def astype(self, dtype):
        return NetParams([w.astype(dtype) for w in self.weights],
                         [b.astype(dtype) for b in self.biases],
                         [m.astype(dtype) for m in self.m_w],
                         [v.astype(dtype) for v in self.v_w],
                         [m.astype(dtype) for m in self.m_b],
                         [v.astype(dtype) for v in self.v_b],
                         self.step)


def init_params(width=DEFAULT_WIDTH, depth=DEFAULT_DEPTH, seed=0,
                dtype=np.float64):
    """Near-identity start: uniform weights of scale 1/sqrt(width), zero
    biases. The residual path then keeps initial outputs close to the inputs."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(width)
    weights = [rng.uniform(-scale, scale, (width, width)).astype(dtype)
               for _ in range(depth)]
    biases = [np.zeros(width, dtype=dtype) for _ in range(depth)]
    return NetParams(weights, biases)


def _elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _elu_grad(z):
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


def forward(params, x, with_cache=False):
    """Apply the residual stack row-wise. x is (n, width)."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != params.width:
        raise DataError(
            f"input width {x.shape[-1] if x.ndim else '?'} does not match "
            f"network width {params.width}")
    x = x.astype(params.dtype, copy=True)
    cache = []
    for W, b in zip(params.weights, params.biases):
        z = x @ W + b
        if with_cache:
            cache.append((x, z))
        x = x + _elu(z)
    if with_cache:
        return x, cache
    return x


def backward(params, cache, output_grad):
    """Exact reverse-mode gradients.

    Returns ((grad_weights, grad_biases), input_grad). cache must come from
    forward(..., with_cache=True) on the same params and input.
    """
    if cache is None or len(cache) != params.depth:
        raise DataError("missing or mismatched forward cache")
    g = np.asarray(output_grad).astype(params.dtype, copy=True)
    grad_w = [None] * params.depth
    grad_b = [None] * params.depth
    for l in range(params.depth - 1, -1, -1):
        x_in, z = cache[l]
        if g.shape != x_in.shape:
            raise DataError("output_grad shape does not match forward pass")
        dz = g * _elu_grad(z)
        grad_w[l] = x_in.T @ dz
        grad_b[l] = dz.sum(axis=0)
        g = g + dz @ params.weights[l].T
    return (grad_w, grad_b), g


def zero_grads(params):
    return ([np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases])


def accumulate_grads(total, extra):
    for t, e in zip(total[0], extra[0]):
        t += e
    for t, e in zip(total[1], extra[1]):
        t += e


def save_checkpoint(params, path):
    """Binary layout: magic, version, block_form, depth, width as uint32 LE,
    step as uint64 LE; per block W then b as float32 LE; then the four ADAM
    moment groups in the same per-block order."""
    with open(path, "wb") as fh:
        fh.write(_NET_MAGIC)
        fh.write(struct.pack("<IIIIQ", _NET_VERSION, _BLOCK_FORM,
                             params.depth, params.width, params.step))
        for W, b in zip(params.weights, params.biases):
            fh.write(W.astype("<f4").tobytes())
            fh.write(b.astype("<f4").tobytes())
        for group in (params.m_w, params.v_w, params.m_b, params.v_b):
            for arr in group:
                fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path, dtype=np.float64):
    with open(path, "rb") as fh:
        magic = fh.read(len(_NET_MAGIC))
        if magic != _NET_MAGIC:
            raise DataError(f"not a checkpoint file: {path}")
        version, block_form, depth, width, step = struct.unpack(
            "<IIIIQ", fh.read(24))
        if version != _NET_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        if block_form != _BLOCK_FORM:
            raise DataError(f"unsupported block form {block_form}")

        def read(shape):
            count = int(np.prod(shape))
            arr = np.frombuffer(fh.read(4 * count), dtype="<f4")
            if arr.size != count:
                raise DataError(f"truncated checkpoint: {path}")
            return arr.reshape(shape).astype(dtype)

        weights, biases = [], []
        for _ in range(depth):
            weights.append(read((width, width)))
            biases.append(read((width,)))
        groups = []
        for shape in ((width, width), (width, width), (width,), (width,)):
            groups.append([read(shape) for _ in range(depth)])
    return NetParams(weights, biases, groups[0], groups[1], groups[2],
                     groups[3], step)
