"""Point-MLP segmentation backbone with adaptable batch normalization.

Every hidden linear layer is followed by a BN layer and a ReLU. After the
encoder a sphere-level max pool is concatenated back onto each point, then
the head blocks and a final linear classifier produce per-point logits.
Forward and backward passes are written out by hand in float64.

BN normalizes with a blend of the stored running statistics and the
current batch statistics::

    mu  = (1 - r) * running_mean + r * batch_mean
    var = (1 - r) * running_var  + r * batch_var

with ``r = 1`` in TRAIN and ADABN, ``r = rho`` in PBN and ``r = 0`` in
SOURCE_EVAL. A single backward rule then covers all four modes.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import InvalidState
from .pointcloud import SphereBatch


class BnMode(enum.Enum):
    TRAIN = "train"
    SOURCE_EVAL = "source_eval"
    ADABN = "adabn"
    PBN = "pbn"


class ParamSubset(enum.Enum):
    BN_AFFINE = "bn"
    FEATURE_EXTRACTOR = "fe"
    ALL = "all"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"bn": cls.BN_AFFINE, "bn_affine": cls.BN_AFFINE, "fe": cls.FEATURE_EXTRACTOR,
                   "feature_extractor": cls.FEATURE_EXTRACTOR, "all": cls.ALL}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown parameter subset {value!r}") from None


@dataclass
class BatchStats:
    mean: np.ndarray
    var: np.ndarray
    m: int


def batch_stats(x: np.ndarray) -> BatchStats:
    """Per-channel mean and biased (divisor m) variance."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch_stats needs at least one row")
    mean = x.mean(axis=0)
    var = np.mean((x - mean) ** 2, axis=0)
    return BatchStats(mean, var, x.shape[0])


@dataclass
class BnLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    rho: float = 0.1
    mode: BnMode = BnMode.TRAIN

    def __post_init__(self):
        c = len(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if len(getattr(self, name)) != c:
                raise ValueError(f"{name} length differs from gamma")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def fresh(cls, channels: int, eps: float = 1e-5, rho: float = 0.1):
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps, rho)

    @property
    def channels(self):
        return len(self.gamma)

    def blend(self) -> float:
        return {BnMode.TRAIN: 1.0, BnMode.ADABN: 1.0,
                BnMode.PBN: self.rho, BnMode.SOURCE_EVAL: 0.0}[self.mode]


def pbn_update(layer: BnLayer, stats: BatchStats) -> None:
    """Running-average update of the stored statistics in place."""
    layer.running_mean, layer.running_var = _ema(layer.running_mean, layer.running_var, stats, layer.rho)


def _ema(mean, var, stats, rho):
    return (1.0 - rho) * mean + rho * stats.mean, (1.0 - rho) * var + rho * stats.var


@dataclass
class _BnCache:
    x: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    blend: float
    batch_mean: Optional[np.ndarray]


def _bn_apply(layer: BnLayer, x: np.ndarray, commit: bool, frozen: bool = False):
    """Shared forward; returns (y, stats used to normalize, cache)."""
    r = 0.0 if frozen else layer.blend()
    if r > 0 and x.shape[0] == 0:
        raise ValueError(f"BN mode {layer.mode.value} needs at least one row")
    stats = batch_stats(x) if r > 0 else None
    if r == 0:
        mean, var = layer.running_mean, layer.running_var
    elif r == 1:
        mean, var = stats.mean, stats.var
    else:
        mean, var = _ema(layer.running_mean, layer.running_var, stats, r)
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xhat = (x - mean) * inv_std
    y = layer.gamma * xhat + layer.beta
    used = BatchStats(mean.copy(), var.copy(), x.shape[0])
    if commit and not frozen:
        if layer.mode is BnMode.TRAIN:
            pbn_update(layer, stats)
        elif layer.mode is BnMode.PBN:
            layer.running_mean, layer.running_var = mean, var
    return y, used, _BnCache(x, xhat, inv_std, r, None if stats is None else stats.mean)


def bn_forward(layer: BnLayer, x: np.ndarray, commit: bool = True):
    """Normalize ``x`` according to the layer mode.

    TRAIN normalizes with batch statistics then folds them into the running
    average; SOURCE_EVAL uses the stored statistics; ADABN uses batch
    statistics and leaves the stored ones alone; PBN first updates the
    stored statistics and then normalizes with the updated values.
    """
    y, used, _ = _bn_apply(layer, np.asarray(x, dtype=np.float64), commit)
    return y, used


def _bn_backward(layer: BnLayer, cache: _BnCache, dy: np.ndarray):
    dgamma = np.sum(dy * cache.xhat, axis=0)
    dbeta = np.sum(dy, axis=0)
    dxhat = dy * layer.gamma
    dx = dxhat * cache.inv_std
    r = cache.blend
    if r > 0:
        m = dy.shape[0]
        # gradient through the batch mean / variance that enter the blend
        dmu = -np.sum(dxhat, axis=0) * cache.inv_std
        dvar = -0.5 * np.sum(dxhat * cache.xhat, axis=0) * cache.inv_std ** 2
        dx = dx + r * (dmu / m + dvar * 2.0 * (cache.x - cache.batch_mean) / m)
    return dx, dgamma, dbeta


@dataclass
class Linear:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.weight.shape


@dataclass
class Block:
    linear: Linear
    bn: BnLayer


@dataclass
class Arch:
    in_features: int = 6
    num_classes: int = 5
    encoder: Sequence[int] = (32, 64, 128)
    head: Sequence[int] = (128, 64)

    def __post_init__(self):
        self.encoder = tuple(int(c) for c in self.encoder)
        self.head = tuple(int(c) for c in self.head)
        if self.in_features not in (3, 6):
            raise ValueError("in_features must be 3 (xyz) or 6 (xyz + rgb)")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if not self.encoder:
            raise ValueError("at least one encoder block is required")
        if any(c < 1 for c in self.encoder + self.head):
            raise ValueError("layer widths must be positive")

    def to_dict(self):
        return {"in_features": self.in_features, "num_classes": self.num_classes,
                "encoder": list(self.encoder), "head": list(self.head)}

    def parameter_count(self):
        total = 0
        c = self.in_features
        for w in self.encoder:
            total += c * w + 2 * w
            c = w
        c = 2 * c
        for w in self.head:
            total += c * w + 2 * w
            c = w
        return total + c * self.num_classes + self.num_classes


@dataclass
class Tape:
    version: int
    frozen: bool
    enc: List[tuple] = field(default_factory=list)    # (input, bn cache, relu mask)
    head: List[tuple] = field(default_factory=list)
    pool_arg: Optional[list] = None
    cls_input: Optional[np.ndarray] = None
    activations: Dict[str, np.ndarray] = field(default_factory=dict)


class SegNet:
    def __init__(self, arch: Arch, encoder: List[Block], head: List[Block], classifier: Linear):
        self.arch = arch
        self.encoder = encoder
        self.head = head
        self.classifier = classifier
        self.version = 0
        self._check()

    def _check(self):
        c = self.arch.in_features
        for name, blocks, widths in (("encoder", self.encoder, self.arch.encoder),
                                     ("head", self.head, self.arch.head)):
            if len(blocks) != len(widths):
                raise ValueError(f"{name} depth does not match arch")
            if name == "head":
                c = 2 * c
            for b, w in zip(blocks, widths):
                if b.linear.shape != (c, w) or b.bn.channels != w:
                    raise ValueError(f"{name} block shapes do not chain")
                c = w
        if self.classifier.shape != (c, self.arch.num_classes):
            raise ValueError("classifier shape does not chain")

    # -- parameters -------------------------------------------------------
    def blocks(self):
        for i, b in enumerate(self.encoder):
            yield f"enc{i}", b
        for i, b in enumerate(self.head):
            yield f"head{i}", b

    def bn_layers(self):
        return [b.bn for _, b in self.blocks()]

    def named_parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        for name, b in self.blocks():
            params[f"{name}.weight"] = b.linear.weight
            params[f"{name}.gamma"] = b.bn.gamma
            params[f"{name}.beta"] = b.bn.beta
        params["cls.weight"] = self.classifier.weight
        params["cls.bias"] = self.classifier.bias
        return params

    def set_parameter(self, name: str, value: np.ndarray):
        prefix, attr = name.split(".")
        if prefix == "cls":
            target = self.classifier
        else:
            target = dict(self.blocks())[prefix]
            target = target.bn if attr in ("gamma", "beta") else target.linear
        current = getattr(target, attr)
        if np.shape(value) != current.shape:
            raise ValueError(f"shape mismatch for {name}")
        setattr(target, attr, np.array(value, dtype=np.float64))
        self.version += 1

    def select(self, subset) -> List[str]:
        subset = ParamSubset.parse(subset)
        names = list(self.named_parameters())
        if subset is ParamSubset.BN_AFFINE:
            return [n for n in names if n.endswith((".gamma", ".beta"))]
        if subset is ParamSubset.FEATURE_EXTRACTOR:
            return [n for n in names if not n.startswith("cls.")]
        return names

    def set_bn_mode(self, mode: BnMode, rho: Optional[float] = None):
        for bn in self.bn_layers():
            bn.mode = mode
            if rho is not None:
                if not 0.0 <= rho <= 1.0:
                    raise ValueError("rho must lie in [0, 1]")
                bn.rho = rho
        self.version += 1

    def running_stats(self):
        return [(bn.running_mean.copy(), bn.running_var.copy()) for bn in self.bn_layers()]

    def copy(self) -> "SegNet":
        def cb(b):
            return Block(Linear(b.linear.weight.copy()),
                         BnLayer(b.bn.gamma.copy(), b.bn.beta.copy(), b.bn.running_mean.copy(),
                                 b.bn.running_var.copy(), b.bn.eps, b.bn.rho, b.bn.mode))
        return SegNet(self.arch, [cb(b) for b in self.encoder], [cb(b) for b in self.head],
                      Linear(self.classifier.weight.copy(), self.classifier.bias.copy()))

    def round_to_float32(self):
        """Snap parameters and statistics to float32-representable values."""
        for _, b in self.blocks():
            b.linear.weight = _f32(b.linear.weight)
            for attr in ("gamma", "beta", "running_mean", "running_var"):
                setattr(b.bn, attr, _f32(getattr(b.bn, attr)))
        self.classifier.weight = _f32(self.classifier.weight)
        self.classifier.bias = _f32(self.classifier.bias)
        self.version += 1
        return self


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def init_network(arch: Arch, seed: int, eps: float = 1e-5, rho: float = 0.1) -> SegNet:
    """He-scaled Gaussian weights; BN starts at gamma=1, beta=0, mean 0, var 1."""
    if not isinstance(arch, Arch):
        arch = Arch(**arch)
    rng = np.random.default_rng(seed)

    def linear(c_in, c_out, bias=False):
        w = rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_in, c_out))
        return Linear(_f32(w), np.zeros(c_out) if bias else None)

    encoder, head = [], []
    c = arch.in_features
    for w in arch.encoder:
        encoder.append(Block(linear(c, w), BnLayer.fresh(w, eps, rho)))
        c = w
    c = 2 * c
    for w in arch.head:
        head.append(Block(linear(c, w), BnLayer.fresh(w, eps, rho)))
        c = w
    return SegNet(arch, encoder, head, linear(c, arch.num_classes, bias=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _segment_rows(segments, n):
    if segments is None:
        return [np.arange(n)]
    return [np.flatnonzero(segments == s) for s in np.unique(segments)]


def _pool_concat(h, segments, tape):
    """Append the per-sphere channel max to every row; remember the argmax rows."""
    cols = np.arange(h.shape[1])
    pooled = np.empty_like(h)
    tape.pool_arg = []
    for rows in _segment_rows(segments, h.shape[0]):
        arg = rows[np.argmax(h[rows], axis=0)]
        pooled[rows] = h[arg, cols]
        tape.pool_arg.append((rows, arg))
    return np.hstack([h, pooled])


def forward(net: SegNet, batch, commit: bool = True, frozen: bool = False):
    """Run the network on a SphereBatch (or a raw n x F feature array).

    ``frozen`` normalizes every BN layer with its stored statistics and
    never updates them, regardless of mode. ``commit=False`` computes the
    mode's normal output without writing statistic updates back.
    Returns ``(logits, probs, tape)``.
    """
    x = batch.features if isinstance(batch, SphereBatch) else batch
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.arch.in_features:
        raise ValueError(f"expected n x {net.arch.in_features} features, got {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    segments = batch.segments if isinstance(batch, SphereBatch) else None
    tape = Tape(version=-1, frozen=frozen)
    h = x
    for name, b in net.blocks():
        if name == "head0":
            h = _pool_concat(h, segments, tape)
        z = h @ b.linear.weight
        y, _, cache = _bn_apply(b.bn, z, commit, frozen)
        mask = y > 0
        record = (h, cache, mask)
        (tape.enc if name.startswith("enc") else tape.head).append(record)
        h = np.maximum(y, 0.0)          # unlike a masked select, keeps NaN visible
        tape.activations[name] = h
    if not net.head:
        h = _pool_concat(h, segments, tape)
    tape.cls_input = h
    logits = h @ net.classifier.weight + net.classifier.bias
    tape.activations["cls"] = logits
    tape.version = net.version
    return logits, softmax(logits), tape


def gradients(net: SegNet, tape: Tape, dlogits: np.ndarray, subset=ParamSubset.ALL) -> Dict[str, np.ndarray]:
    """Reverse pass; returns gradients for the selected parameters only."""
    if tape.version != net.version:
        raise InvalidState("tape is stale: the network changed after the forward pass")
    wanted = set(net.select(subset))
    grads: Dict[str, np.ndarray] = {}

    def keep(name, value):
        if name in wanted:
            grads[name] = value

    dlogits = np.asarray(dlogits, dtype=np.float64)
    keep("cls.weight", tape.cls_input.T @ dlogits)
    keep("cls.bias", dlogits.sum(axis=0))
    dh = dlogits @ net.classifier.weight.T

    def block_backward(name, block, record, dh):
        h_in, cache, mask = record
        dy = np.where(mask, dh, 0.0)
        dz, dgamma, dbeta = _bn_backward(block.bn, cache, dy)
        keep(f"{name}.gamma", dgamma)
        keep(f"{name}.beta", dbeta)
        keep(f"{name}.weight", h_in.T @ dz)
        return dz @ block.linear.weight.T

    def unpool(dh):
        c = dh.shape[1] // 2
        d_local = dh[:, :c].copy()
        cols = np.arange(c)
        for rows, arg in tape.pool_arg:
            np.add.at(d_local, (arg, cols), dh[rows, c:].sum(axis=0))
        return d_local

    for i in reversed(range(len(net.head))):
        dh = block_backward(f"head{i}", net.head[i], tape.head[i], dh)
    dh = unpool(dh)
    for i in reversed(range(len(net.encoder))):
        dh = block_backward(f"enc{i}", net.encoder[i], tape.enc[i], dh)
    return grads


def predict(net: SegNet, batch) -> np.ndarray:
    """Probabilities with stored statistics, no state change."""
    return forward(net, batch, commit=False, frozen=True)[1]


def first_nonfinite_layer(tape: Tape) -> Optional[str]:
    for name, act in tape.activations.items():
        if not np.all(np.isfinite(act)):
            return name
    return None
