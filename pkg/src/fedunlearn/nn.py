"""Small deterministic network engine on float64 numpy arrays.

Networks are plain layer lists (``Dense``, ``ReLU``, ``Flatten``) evaluated
functionally against a :class:`ParamSet`.  Besides forward/backward and SGD
this module computes the diagonal of the generalized Gauss-Newton matrix of
the mean softmax cross-entropy, which is the curvature used for unlearning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator, Union

import numpy as np

from fedunlearn.errors import NumericError, ShapeError, SpecError

if TYPE_CHECKING:
    from fedunlearn.data import Dataset

GGN = "ggn"
FD_EXACT = "fd-exact"


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    bias: bool = True


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Dense, ReLU, Flatten]


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus the number of output classes."""

    layers: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.num_classes < 2:
            raise SpecError(f"num_classes must be >= 2, got {self.num_classes}")
        width = None
        n_dense = 0
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if layer.in_features < 1 or layer.out_features < 1:
                    raise SpecError(f"layer {i}: Dense sizes must be positive")
                if width is not None and layer.in_features != width:
                    raise SpecError(
                        f"layer {i}: expects {layer.in_features} inputs, previous layer gives {width}"
                    )
                width = layer.out_features
                n_dense += 1
            elif not isinstance(layer, (ReLU, Flatten)):
                raise SpecError(f"layer {i}: unsupported layer type {type(layer).__name__}")
        if n_dense == 0:
            raise SpecError("network needs at least one Dense layer")
        if width != self.num_classes:
            raise SpecError(f"final width {width} != num_classes {self.num_classes}")

    @classmethod
    def mlp(cls, sizes, bias: bool = True) -> "NetworkSpec":
        """``mlp([784, 64, 32, 10])`` builds Dense/ReLU stacks ending in logits."""
        if len(sizes) < 2:
            raise SpecError("mlp needs at least input and output sizes")
        layers: list = [Flatten()]
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            layers.append(Dense(int(a), int(b), bias))
            if k < len(sizes) - 2:
                layers.append(ReLU())
        return cls(tuple(layers), int(sizes[-1]))

    @property
    def input_width(self) -> int:
        return next(l.in_features for l in self.layers if isinstance(l, Dense))

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                shapes[f"{i}.weight"] = (layer.out_features, layer.in_features)
                if layer.bias:
                    shapes[f"{i}.bias"] = (layer.out_features,)
        return shapes


@dataclass
class BlockMap:
    """Ordered mapping of block name to float64 array."""

    blocks: dict

    @property
    def names(self) -> list[str]:
        return list(self.blocks)

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self.blocks.values()])

    def unflatten(self, vec: np.ndarray) -> dict:
        out, pos = {}, 0
        for name, b in self.blocks.items():
            out[name] = np.asarray(vec[pos:pos + b.size], dtype=b.dtype).reshape(b.shape).copy()
            pos += b.size
        if pos != len(vec):
            raise ShapeError(f"flat vector has {len(vec)} values, expected {pos}")
        return out

    def same_layout(self, other: "BlockMap") -> bool:
        return list(self.blocks) == list(other.blocks) and all(
            self.blocks[k].shape == other.blocks[k].shape for k in self.blocks
        )

    def bit_equal(self, other: "BlockMap") -> bool:
        return self.same_layout(other) and all(
            np.array_equal(self.blocks[k], other.blocks[k]) for k in self.blocks
        )


@dataclass
class ParamSet(BlockMap):
    """Network parameters; ``rng_seed`` records the seed used by :func:`init_params`."""

    rng_seed: int | None = None

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.blocks.items()}, self.rng_seed)

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self.blocks.items()})


@dataclass
class HessianDiag(BlockMap):
    """Per-element curvature of the mean loss, congruent with a ParamSet."""

    mode: str = GGN

    @classmethod
    def zeros(cls, like: BlockMap, mode: str = GGN) -> "HessianDiag":
        return cls({k: np.zeros_like(v, dtype=np.float64) for k, v in like.blocks.items()}, mode)


@dataclass
class LossValue:
    mean_loss: float
    per_sample_losses: np.ndarray | None = None


def init_params(spec: NetworkSpec, seed: int) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    blocks = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            bound = 1.0 / math.sqrt(layer.in_features)
            blocks[f"{i}.weight"] = rng.uniform(
                -bound, bound, size=(layer.out_features, layer.in_features)
            )
            if layer.bias:
                blocks[f"{i}.bias"] = np.zeros(layer.out_features)
    return ParamSet(blocks, int(seed))


def _check_params(spec: NetworkSpec, params: BlockMap) -> None:
    expected = spec.param_shapes()
    got = {k: v.shape for k, v in params.blocks.items()}
    if got != expected:
        raise ShapeError(f"parameter blocks {got} do not match spec {expected}")


def _as_batch(spec: NetworkSpec, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != spec.input_width:
        raise ShapeError(f"batch width {x.shape[1]} != network input width {spec.input_width}")
    return x


def _forward_cache(spec: NetworkSpec, blocks: dict, x: np.ndarray):
    """Run the network, keeping each Dense input and each ReLU activity mask."""
    cache = []
    a = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            cache.append(a)
            a = a @ blocks[f"{i}.weight"].T
            if layer.bias:
                a = a + blocks[f"{i}.bias"]
        elif isinstance(layer, ReLU):
            cache.append(a > 0)
            a = np.maximum(a, 0.0)
        else:
            cache.append(None)
            a = a.reshape(a.shape[0], -1)
    return a, cache


def forward(spec: NetworkSpec, params: BlockMap, batch) -> np.ndarray:
    """Logits of shape ``[batch_size, num_classes]``."""
    _check_params(spec, params)
    logits, _ = _forward_cache(spec, params.blocks, _as_batch(spec, batch))
    return logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(spec: NetworkSpec, labels, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).ravel()
    if n == 0:
        raise ShapeError("empty batch")
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for {n} samples")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    return y


def per_sample_loss(spec: NetworkSpec, params: BlockMap, batch, labels) -> np.ndarray:
    x = _as_batch(spec, batch)
    y = _check_labels(spec, labels, x.shape[0])
    logp = log_softmax(forward(spec, params, x))
    return -logp[np.arange(len(y)), y]


def _backward(spec: NetworkSpec, blocks: dict, cache: list, g: np.ndarray) -> dict:
    grads = {}
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        if isinstance(layer, Dense):
            a_in = cache[i]
            grads[f"{i}.weight"] = g.T @ a_in
            if layer.bias:
                grads[f"{i}.bias"] = g.sum(axis=0)
            if i > 0:
                g = g @ blocks[f"{i}.weight"]
        elif isinstance(layer, ReLU):
            g = g * cache[i]
    return {name: grads[name] for name in spec.param_shapes()}


def loss_and_grad(spec: NetworkSpec, params: BlockMap, batch, labels) -> tuple[LossValue, ParamSet]:
    """Mean softmax cross-entropy and its gradient with respect to every parameter."""
    _check_params(spec, params)
    x = _as_batch(spec, batch)
    y = _check_labels(spec, labels, x.shape[0])
    logits, cache = _forward_cache(spec, params.blocks, x)
    logp = log_softmax(logits)
    n = len(y)
    losses = -logp[np.arange(n), y]
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = _backward(spec, params.blocks, cache, dlogits)
    return LossValue(float(losses.mean()), losses), ParamSet(grads)


def iter_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One epoch of seeded shuffled index batches; the last partial batch is kept."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


@dataclass
class SGD:
    """SGD with heavy-ball momentum: ``buf = momentum*buf + grad; p -= lr*buf``."""

    lr: float = 0.01
    momentum: float = 0.9
    buffers: dict = field(default_factory=dict)

    def step(self, blocks: dict, grads: dict) -> None:
        for name, g in grads.items():
            if self.momentum:
                buf = self.buffers.get(name)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[name] = buf
            else:
                buf = g
            blocks[name] -= self.lr * buf


def sgd_train(
    spec: NetworkSpec,
    params: ParamSet,
    dataset: "Dataset",
    epochs: int,
    lr: float = 0.01,
    momentum: float = 0.9,
    batch_size: int = 32,
    seed: int = 0,
) -> ParamSet:
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    out = params.copy()
    if epochs == 0:
        return out
    n = len(dataset.labels)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    opt = SGD(lr, momentum)
    for _ in range(epochs):
        for idx in iter_batches(n, batch_size, rng):
            _, grad = loss_and_grad(spec, out, dataset.features[idx], dataset.labels[idx])
            opt.step(out.blocks, grad.blocks)
    return out


def _output_hessian_factor(probs: np.ndarray) -> np.ndarray:
    """Per-sample S with S S^T = diag(p) - p p^T; returns shape [n, C(columns), C]."""
    sq = np.sqrt(probs)
    n, c = probs.shape
    # column k of S is sqrt(p_k) * (e_k - p)
    factor = -sq[:, :, None] * probs[:, None, :]
    factor[:, np.arange(c), np.arange(c)] += sq
    return factor


def _ggn_diag_chunk(spec: NetworkSpec, blocks: dict, x: np.ndarray, acc: dict) -> None:
    logits, cache = _forward_cache(spec, blocks, x)
    g = _output_hessian_factor(softmax(logits))
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        if isinstance(layer, Dense):
            g2 = g * g
            acc[f"{i}.weight"] += np.einsum("nko,ni->oi", g2, cache[i] * cache[i])
            if layer.bias:
                acc[f"{i}.bias"] += g2.sum(axis=(0, 1))
            if i > 0:
                g = g @ blocks[f"{i}.weight"]
        elif isinstance(layer, ReLU):
            g = g * cache[i][:, None, :]


def _fd_hessian_diag(spec, params, x, y, step=1e-5) -> dict:
    out = {}
    work = params.copy()
    for name, block in params.blocks.items():
        diag = np.empty(block.size)
        flat = work.blocks[name].reshape(-1)
        for j in range(block.size):
            orig = flat[j]
            flat[j] = orig + step
            gp = loss_and_grad(spec, work, x, y)[1].blocks[name].reshape(-1)[j]
            flat[j] = orig - step
            gm = loss_and_grad(spec, work, x, y)[1].blocks[name].reshape(-1)[j]
            flat[j] = orig
            diag[j] = (gp - gm) / (2 * step)
        out[name] = diag.reshape(block.shape)
    return out


def hessian_diag(
    spec: NetworkSpec, params: BlockMap, dataset: "Dataset", mode: str = GGN, chunk_size: int = 256
) -> HessianDiag:
    """Diagonal curvature of the mean cross-entropy over ``dataset``.

    ``mode="ggn"`` gives the exact diagonal of the generalized Gauss-Newton
    matrix, ``(1/N) sum_n J_n^T (diag(p_n) - p_n p_n^T) J_n``, via one backward
    sweep per output class.  ``mode="fd-exact"`` differentiates the analytic
    gradient by central differences and is meant for checking small nets only.
    """
    _check_params(spec, params)
    x = _as_batch(spec, dataset.features)
    y = _check_labels(spec, dataset.labels, x.shape[0])
    n = x.shape[0]
    if mode == GGN:
        acc = {k: np.zeros_like(v) for k, v in params.blocks.items()}
        for start in range(0, n, chunk_size):
            _ggn_diag_chunk(spec, params.blocks, x[start:start + chunk_size], acc)
        blocks = {k: v / n for k, v in acc.items()}
    elif mode == FD_EXACT:
        blocks = _fd_hessian_diag(spec, params, x, y)
    else:
        raise ValueError(f"unknown curvature mode {mode!r}")
    for name, b in blocks.items():
        if not np.all(np.isfinite(b)):
            raise NumericError(f"non-finite curvature in block {name!r}")
    return HessianDiag(blocks, mode)


def predict(spec: NetworkSpec, params: BlockMap, batch) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class index."""
    return np.argmax(forward(spec, params, batch), axis=1)

