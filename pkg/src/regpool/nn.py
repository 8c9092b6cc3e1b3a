"""A small numpy CNN stack with hand-written backward passes.

Layers hold their parameters in ``params`` and, after ``backward``, the
matching gradients in ``grads`` (same keys). A :class:`LayerGraph` chains them
and owns parameter initialisation, checkpoints and shape checks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from regpool.errors import ShapeError
from regpool.pooling import PoolConfig, output_dims, pool_backward, pool_forward

CHECKPOINT_MAGIC = b"RPCK"
CHECKPOINT_VERSION = 1


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> str:
        return self.kind


class Conv2D(Layer):
    """Cross-correlation with ``(out, in, k, k)`` weights and per-channel bias."""

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.stride = stride
        self.padding = padding
        # The first layer of a graph has no upstream consumer for its input gradient.
        self.input_grad = True
        self.params = {
            "weight": np.zeros((out_channels, in_channels, kernel_size, kernel_size)),
            "bias": np.zeros(out_channels),
        }

    def init_params(self, rng):
        fan_in = self.in_channels * self.k * self.k
        self.params["weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), self.params["weight"].shape)
        self.params["bias"] = np.zeros(self.out_channels)

    def output_shape(self, in_shape):
        if len(in_shape) != 4 or in_shape[1] != self.in_channels:
            raise ShapeError(f"conv expects (N, {self.in_channels}, H, W), got {in_shape}")
        N, _, H, W = in_shape
        Ho = (H + 2 * self.padding - self.k) // self.stride + 1
        Wo = (W + 2 * self.padding - self.k) // self.stride + 1
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"conv kernel {self.k} does not fit a {H}x{W} map")
        return N, self.out_channels, Ho, Wo

    def _cols(self, xp: np.ndarray, Ho: int, Wo: int) -> np.ndarray:
        """im2col buffer of shape (N, C*k*k, Ho*Wo)."""
        s, k = self.stride, self.k
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        return win.transpose(0, 1, 4, 5, 2, 3).reshape(xp.shape[0], -1, Ho * Wo)

    def forward(self, x, training=False, rng=None):
        N, O, Ho, Wo = self.output_shape(x.shape)
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        self._cols_cache = self._cols(xp, Ho, Wo)
        self._in_shape = x.shape
        out = np.matmul(self.params["weight"].reshape(O, -1), self._cols_cache)
        out += self.params["bias"][:, None]
        return out.reshape(N, O, Ho, Wo)

    def backward(self, grad):
        cols = self._cols_cache
        N, C, H, W = self._in_shape
        O, k, s, p = self.out_channels, self.k, self.stride, self.padding
        _, _, Ho, Wo = grad.shape
        gm = np.ascontiguousarray(grad).reshape(N, O, Ho * Wo)
        dw = np.zeros((O, C * k * k))
        for n in range(N):
            dw += gm[n] @ cols[n].T
        self.grads = {"weight": dw.reshape(self.params["weight"].shape),
                      "bias": gm.sum(axis=(0, 2))}
        self._cols_cache = None
        if not self.input_grad:
            return None
        if s == 1 and p <= k - 1:
            # Stride-1 input gradient is a full correlation with the flipped kernel.
            q = k - 1 - p
            gp = np.pad(grad, ((0, 0), (0, 0), (q, q), (q, q))) if q else grad
            win = sliding_window_view(gp, (k, k), axis=(2, 3))[:, :, :H, :W]
            gcols = win.transpose(0, 1, 4, 5, 2, 3).reshape(N, O * k * k, H * W)
            wf = self.params["weight"][:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
            return np.matmul(wf, gcols).reshape(N, C, H, W)
        dcols = np.matmul(self.params["weight"].reshape(O, -1).T, gm).reshape(N, C, k, k, Ho, Wo)
        dxp = np.zeros((N, C, H + 2 * p, W + 2 * p))
        for kr in range(k):
            for kc in range(k):
                dxp[:, :, kr:kr + s * (Ho - 1) + 1:s, kc:kc + s * (Wo - 1) + 1:s] += dcols[:, :, kr, kc]
        return dxp[:, :, p:p + H, p:p + W].copy()

    def describe(self):
        return f"conv {self.k}x{self.k}, {self.out_channels}"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


class Pool(Layer):
    kind = "pool"

    def __init__(self, pool_kind: str, cfg: PoolConfig):
        super().__init__()
        if pool_kind not in ("max", "avg", "regularized"):
            raise ValueError(f"unknown pooling kind {pool_kind!r}")
        self.pool_kind = pool_kind
        self.cfg = cfg

    def output_shape(self, in_shape):
        if len(in_shape) != 4:
            raise ShapeError(f"pooling expects (N, C, H, W), got {in_shape}")
        I, J = output_dims(in_shape[2], in_shape[3], self.cfg)
        return in_shape[0], in_shape[1], I, J

    def forward(self, x, training=False, rng=None):
        out, self._cache = pool_forward(self.pool_kind, x, self.cfg)
        self._in_shape = x.shape
        return out

    def backward(self, grad):
        return pool_backward(self.pool_kind, grad, self._cache, self._in_shape, self.cfg)

    def describe(self):
        extra = f", w={self.cfg.w}" if self.pool_kind == "regularized" else ""
        return f"{self.pool_kind} pool {self.cfg.n}x{self.cfg.n}, s={self.cfg.s}{extra}"


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` in training."""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs a random generator")
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask

    def describe(self):
        return f"dropout {self.rate}"


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return in_shape[0], int(np.prod(in_shape[1:]))

    def forward(self, x, training=False, rng=None):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._in_shape)


class Dense(Layer):
    """Fully connected layer, ``y = x @ weight.T + bias``."""

    kind = "fc"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params = {"weight": np.zeros((out_features, in_features)),
                       "bias": np.zeros(out_features)}

    def init_params(self, rng):
        self.params["weight"] = rng.normal(0.0, np.sqrt(2.0 / self.in_features),
                                           (self.out_features, self.in_features))
        self.params["bias"] = np.zeros(self.out_features)

    def output_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] != self.in_features:
            raise ShapeError(f"fc expects (N, {self.in_features}), got {in_shape}")
        return in_shape[0], self.out_features

    def forward(self, x, training=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"fc expects (N, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        self.grads = {"weight": grad.T @ self._x, "bias": grad.sum(axis=0)}
        return grad @ self.params["weight"]

    def describe(self):
        return f"fc {self.in_features}->{self.out_features}"


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross entropy of softmax(logits) and its gradient w.r.t. logits.

    The gradient is ``(probs - one_hot) / batch_size`` because the loss is a
    batch mean.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    N, K = logits.shape
    if labels.shape != (N,):
        raise ShapeError(f"expected {N} labels, got shape {labels.shape}")
    if np.any((labels < 0) | (labels >= K)):
        raise ValueError(f"labels must lie in [0, {K})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(N)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / N


@dataclass
class OptimizerSpec:
    kind: str = "sgd"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        p -= lr * g


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              spec: OptimizerSpec) -> None:
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - spec.beta1 ** t
    c2 = 1.0 - spec.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= spec.beta1
        m += (1.0 - spec.beta1) * g
        v *= spec.beta2
        v += (1.0 - spec.beta2) * g * g
        p -= spec.lr * (m / c1) / (np.sqrt(v / c2) + spec.eps)


class Optimizer:
    def __init__(self, spec: OptimizerSpec):
        self.spec = spec
        self.state = AdamState()

    def step(self, params, grads):
        if self.spec.kind == "sgd":
            sgd_step(params, grads, self.spec.lr)
        else:
            adam_step(params, grads, self.state, self.spec)


class LayerGraph:
    """Ordered layer stack; the final softmax is fused into the loss."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, int, int]):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.shape_chain(self.input_shape)

    def shape_chain(self, input_shape=None, batch: int = 1) -> list[tuple[int, ...]]:
        """Output shape after every layer; raises :class:`ShapeError` on mismatch."""
        shape = (batch,) + tuple(input_shape or self.input_shape)
        chain = []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            chain.append(shape)
        return chain

    def init_params(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init_params(rng)

    def param_refs(self) -> list[tuple[int, str]]:
        return [(i, name) for i, layer in enumerate(self.layers) for name in layer.params]

    def parameters(self) -> list[np.ndarray]:
        return [self.layers[i].params[name] for i, name in self.param_refs()]

    def gradients(self) -> list[np.ndarray]:
        return [self.layers[i].grads[name] for i, name in self.param_refs()]

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def layer(self, kind: str, index: int = 0) -> Layer:
        matches = [layer for layer in self.layers if layer.kind == kind]
        return matches[index]

    def save(self, path) -> None:
        """Write parameters as a little-endian checkpoint.

        Layout: magic ``RPCK``, u32 version, u32 tensor count, then per tensor
        u32 rank, rank x u32 extents and the float64 values in row-major order.
        """
        params = self.parameters()
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
            for p in params:
                f.write(struct.pack("<I", p.ndim))
                f.write(struct.pack(f"<{p.ndim}I", *p.shape))
                f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())

    def load(self, path) -> None:
        data = Path(path).read_bytes()
        if data[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        version, count = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        refs = self.param_refs()
        if count != len(refs):
            raise ShapeError(f"{path}: {count} tensors, graph has {len(refs)}")
        pos = 12
        loaded = []
        for i, name in refs:
            (ndim,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            expected = self.layers[i].params[name].shape
            if tuple(shape) != expected:
                raise ShapeError(f"{path}: tensor shape {shape} does not match {expected}")
            size = int(np.prod(shape)) * 8
            if pos + size > len(data):
                raise ValueError(f"{path}: truncated checkpoint")
            loaded.append(np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos)
                          .reshape(shape).astype(np.float64))
            pos += size
        for (i, name), value in zip(refs, loaded):
            self.layers[i].params[name] = value


REFERENCE_WIDTHS = (64, 128, 256)


def build_reference_graph(pool_kind: str = "regularized", pool_cfg: PoolConfig | None = None,
                          width: float = 1.0, num_classes: int = 10, input_size: int = 60,
                          in_channels: int = 1, dropout: float = 0.25) -> LayerGraph:
    """Three conv blocks (two 3x3 convs + ReLU each), each followed by pooling.

    Only the first pooling layer is configurable; the later two are 2x2 max
    pooling with stride 2. ``width`` scales the 64/128/256 channel counts.
    """
    if pool_cfg is None:
        pool_cfg = PoolConfig(n=5, w=3, s=5)
    c1, c2, c3 = (max(1, int(round(c * width))) for c in REFERENCE_WIDTHS)
    layers: list[Layer] = []
    prev = in_channels
    pools = [Pool(pool_kind, pool_cfg), Pool("max", PoolConfig(2)), Pool("max", PoolConfig(2))]
    for ch, pool in zip((c1, c2, c3), pools):
        layers += [Conv2D(prev, ch), ReLU(), Conv2D(ch, ch), ReLU(), pool]
        prev = ch
    layers += [Flatten(), Dropout(dropout)]
    probe = LayerGraph(layers, (in_channels, input_size, input_size))
    flat = probe.shape_chain()[-1][1]
    layers.append(Dense(flat, num_classes))
    layers[0].input_grad = False
    return LayerGraph(layers, (in_channels, input_size, input_size))


def pooled_shape_chain(graph: LayerGraph) -> list[tuple[int, int]]:
    """Spatial size at the input and after every pooling layer."""
    chain = graph.shape_chain()
    sizes = [graph.input_shape[1:]]
    for layer, shape in zip(graph.layers, chain):
        if layer.kind == "pool":
            sizes.append(tuple(shape[2:]))
    return sizes


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_step(graph: LayerGraph, x: np.ndarray, y: np.ndarray, opt: Optimizer,
               rng: np.random.Generator) -> tuple[float, int]:
    logits = graph.forward(x, training=True, rng=rng)
    loss, grad = softmax_cross_entropy(logits, y)
    graph.backward(grad)
    opt.step(graph.parameters(), graph.gradients())
    return loss, int(np.sum(np.argmax(logits, axis=1) == y))


def train_epoch(graph: LayerGraph, images: np.ndarray, labels: np.ndarray, opt: Optimizer,
                batch_size: int, rng: np.random.Generator) -> dict:
    """One shuffled pass over the data; returns mean loss and accuracy."""
    total_loss = 0.0
    correct = 0
    for idx in iterate_batches(len(labels), batch_size, rng):
        loss, hits = train_step(graph, images[idx], labels[idx], opt, rng)
        total_loss += loss * len(idx)
        correct += hits
    n = len(labels)
    return {"loss": total_loss / n, "accuracy": correct / n}


def predict(graph: LayerGraph, images: np.ndarray, batch_size: int = 100) -> np.ndarray:
    preds = [np.argmax(graph.forward(images[idx]), axis=1)
             for idx in iterate_batches(len(images), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm
