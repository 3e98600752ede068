"""Source training and test-time adaptation loops."""
from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import selfsup
from .errors import InvalidState, NumericalAbort
from .network import (BnMode, ParamSubset, SegNet, first_nonfinite_layer, forward, gradients,
                      pbn_update)
from .pointcloud import (PointCloud, SphereBatch, VoteBuffer, grid_subsample, iter_batches,
                         jitter_batch)

log = logging.getLogger(__name__)

__all__ = ["Mode", "SamplingConfig", "AdaptConfig", "AdamState", "LossReport", "adam_step",
           "pbn_update", "train_source", "adapt_step", "run_tta", "TTAResult"]


class Mode(enum.Enum):
    SOURCE = "source"
    ADABN = "adabn"
    TENT = "tent"
    PBN = "pbn"
    PBN_IM = "pbn_im"
    FULL = "full"

    @property
    def bn_mode(self) -> BnMode:
        if self is Mode.SOURCE:
            return BnMode.SOURCE_EVAL
        if self in (Mode.ADABN, Mode.TENT):
            return BnMode.ADABN
        return BnMode.PBN

    @property
    def optimizes(self):
        return self in (Mode.TENT, Mode.PBN_IM, Mode.FULL)

    @property
    def uses_im(self):
        return self in (Mode.PBN_IM, Mode.FULL)

    @property
    def uses_pl(self):
        return self is Mode.FULL


@dataclass
class SamplingConfig:
    cell: float = 0.2
    radius: float = 15.0
    max_points: int = 40000
    target_visits: float = 3.0
    spheres_per_batch: int = 1

    def batches(self, cloud, seed, target_visits=None, use_colors=None):
        return iter_batches(cloud, self.radius, self.max_points,
                            self.target_visits if target_visits is None else target_visits,
                            seed, self.spheres_per_batch, use_colors)

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


@dataclass
class AdaptConfig:
    mode: Mode = Mode.FULL
    rho: float = 0.01
    lr: float = 1e-4
    lambda_pl: float = 1.0
    jitter_sigma: float = 0.05
    param_subset: ParamSubset = ParamSubset.BN_AFFINE
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    entropy_sign_div: bool = False

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.param_subset = ParamSubset.parse(self.param_subset)
        self.betas = tuple(self.betas)
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.lambda_pl < 0:
            raise ValueError("lambda_pl must be non-negative")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["mode"] = self.mode.value
        d["param_subset"] = self.param_subset.value
        d["betas"] = list(self.betas)
        return d


class AdamState:
    def __init__(self, betas=(0.9, 0.999), eps=1e-8):
        self.betas = tuple(betas)
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0


def adam_step(opt: AdamState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              lr: float) -> Dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new arrays for the graded names."""
    b1, b2 = opt.betas
    opt.step += 1
    t = opt.step
    out = {}
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = opt.m.get(name, np.zeros_like(p))
        v = opt.v.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        opt.m[name], opt.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return out


def _apply(net: SegNet, new_params: Dict[str, np.ndarray]):
    for name, value in new_params.items():
        net.set_parameter(name, value)


# -- source training ----------------------------------------------------------

def train_source(net: SegNet, clouds: Iterable[PointCloud], epochs: int, lr: float, seed: int,
                 sampling: SamplingConfig = None, visits_per_epoch: float = 1.0) -> List[float]:
    """Supervised cross-entropy training of all parameters.

    Clouds must already carry labels in the benchmark class space (-1 is
    ignored). BN runs in TRAIN mode and accumulates running statistics; on
    return the network is in SOURCE_EVAL mode with float32-exact values.
    Returns the mean loss per epoch.
    """
    sampling = sampling or SamplingConfig()
    use_colors = net.arch.in_features == 6
    prepared = []
    for cloud in clouds:
        if cloud.labels is None:
            raise ValueError("training clouds need labels")
        prepared.append(grid_subsample(cloud, sampling.cell).cloud)
    opt = AdamState()
    trace = []
    for epoch in range(epochs):
        net.set_bn_mode(BnMode.TRAIN)
        total, seen = 0.0, 0
        for ci, cloud in enumerate(prepared):
            for batch in sampling.batches(cloud, [seed, epoch, ci], visits_per_epoch, use_colors):
                labels = cloud.labels[batch.parent]
                if not (labels >= 0).any() or len(batch) < 2:
                    continue
                logits, _, tape = forward(net, batch)
                loss, dlogits, count = selfsup.cross_entropy(logits, labels)
                if not np.isfinite(loss):
                    raise NumericalAbort(f"non-finite training loss at epoch {epoch}",
                                         first_nonfinite_layer(tape))
                grads = gradients(net, tape, dlogits, ParamSubset.ALL)
                _apply(net, adam_step(opt, net.named_parameters(), grads, lr))
                total += loss * count
                seen += count
        if seen == 0:
            raise InvalidState(f"epoch {epoch} saw no labeled points")
        trace.append(total / seen)
        log.info("epoch %d loss %.4f", epoch, trace[-1])
    net.set_bn_mode(BnMode.SOURCE_EVAL)
    net.round_to_float32()
    return trace


# -- test-time adaptation -----------------------------------------------------

@dataclass
class LossReport:
    batch: int
    n: int
    er: float = 0.0
    div_term: float = 0.0
    im: float = 0.0
    pl: float = 0.0
    total: float = 0.0
    mean_w: float = 0.0
    skipped: bool = False

    def to_dict(self):
        return asdict(self)


def prepare_net(net: SegNet, cfg: AdaptConfig) -> SegNet:
    net.set_bn_mode(cfg.mode.bn_mode, rho=cfg.rho)
    return net


def objective(net: SegNet, batch: SphereBatch, cfg: AdaptConfig, commit: bool,
              aug: Optional[SphereBatch] = None, batch_index: int = 0):
    """Clean forward, self-supervised loss and its logit gradient.

    ``aug`` is the jittered copy of ``batch``; it is only used in FULL mode
    and is evaluated with the (already updated) stored statistics frozen.
    Returns ``(probs, report, dlogits, tape)``.
    """
    logits, probs, tape = forward(net, batch, commit=commit)
    report = LossReport(batch=batch_index, n=len(batch))
    dlogits = np.zeros_like(logits)
    if not cfg.mode.optimizes:
        return probs, report, dlogits, tape

    if cfg.mode is Mode.TENT:
        report.er = selfsup.entropy_loss(probs)
        report.total = report.er
        dlogits = selfsup.entropy_loss_grad(probs)
    else:
        report.er, report.div_term, report.im = selfsup.im_loss(probs, cfg.entropy_sign_div)
        report.total = report.im
        dlogits = selfsup.im_loss_grad(probs, cfg.entropy_sign_div)

    if cfg.mode.uses_pl and cfg.lambda_pl > 0:
        _, p_aug, _ = forward(net, aug, commit=False, frozen=True)
        weights = selfsup.reliability_weights(probs, p_aug)
        pseudo = selfsup.make_pseudo_labels(probs)
        report.pl, report.skipped = selfsup.pl_loss(probs, pseudo, weights)
        report.mean_w = float(weights.w.mean())
        if not report.skipped:
            report.total += cfg.lambda_pl * report.pl
            dlogits = dlogits + cfg.lambda_pl * selfsup.pl_loss_grad(probs, pseudo, weights)
    return probs, report, dlogits, tape


def adapt_step(net: SegNet, batch: SphereBatch, cfg: AdaptConfig, opt: AdamState,
               batch_index: int = 0):
    """One online adaptation step on a single batch.

    Statistics are updated by the clean forward; the augmented forward (FULL
    only) reuses them without a second update. Reliability weights and
    pseudo-labels are constants. A single Adam step follows. Returns the
    clean-branch probabilities and the loss report.
    """
    aug = None
    if cfg.mode.uses_pl:
        aug = jitter_batch(batch, cfg.jitter_sigma, [cfg.seed, batch_index, 1])
    probs, report, dlogits, tape = objective(net, batch, cfg, commit=True, aug=aug,
                                             batch_index=batch_index)
    if not cfg.mode.optimizes:
        return probs, report
    if not np.isfinite(report.total):
        layer = first_nonfinite_layer(tape) or "loss"
        raise NumericalAbort(f"non-finite loss at batch {batch_index}; first offending layer: {layer}", layer)
    grads = gradients(net, tape, dlogits, cfg.param_subset)
    if cfg.lr > 0:
        _apply(net, adam_step(opt, net.named_parameters(), grads, cfg.lr))
    return probs, report


@dataclass
class TTAResult:
    labels: np.ndarray              # full-resolution predictions, -1 where unvisited
    net: SegNet
    log: List[LossReport] = field(default_factory=list)
    sub_labels: Optional[np.ndarray] = None
    sub_probs: Optional[np.ndarray] = None
    num_batches: int = 0


def run_tta(net: SegNet, cloud: PointCloud, cfg: AdaptConfig,
            sampling: SamplingConfig = None, copy: bool = True) -> TTAResult:
    """Adapt ``net`` on an unlabeled target cloud while predicting it.

    The cloud is grid-subsampled, covered by overlapping spheres in sampler
    order, each sphere passes through ``adapt_step``, per-point probabilities
    are averaged over visits and the labels are projected back through the
    subsampling map. Ground-truth labels on ``cloud`` are never read.
    """
    sampling = sampling or SamplingConfig()
    if copy:
        net = net.copy()
    prepare_net(net, cfg)
    unlabeled = PointCloud(cloud.positions, cloud.colors)
    sub = grid_subsample(unlabeled, sampling.cell)
    buffer = VoteBuffer(len(sub.cloud), net.arch.num_classes)
    opt = AdamState(cfg.betas, cfg.adam_eps)
    reports = []
    use_colors = net.arch.in_features == 6
    count = 0
    for i, batch in enumerate(sampling.batches(sub.cloud, cfg.seed, use_colors=use_colors)):
        probs, report = adapt_step(net, batch, cfg, opt, batch_index=i)
        buffer.accumulate(batch.parent, probs)
        reports.append(report)
        count += 1
    sub_labels, sub_probs = buffer.finalize()
    labels = sub_labels[sub.mapping] if len(cloud) else np.zeros(0, np.int64)
    return TTAResult(labels, net, reports, sub_labels, sub_probs, count)
