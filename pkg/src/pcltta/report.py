"""Benchmark assets and the experiment harness (mode ablation, lr sweep, seed repetition)."""
from __future__ import annotations

import csv
import io as _io
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Optional, Sequence

import numpy as np

from .adaptation import AdaptConfig, Mode, SamplingConfig, run_tta, train_source
from .metrics import Scores, accumulate_confusion, scores
from .network import Arch, SegNet, init_network
from .pointcloud import PointCloud
from .synthgen import CLASSES, SceneSpec, ShiftSpec, apply_domain_shift, generate_scene_with_normals

log = logging.getLogger(__name__)

ABLATION_MODES = ("source", "pbn", "pbn_im", "full")
_BENCH_FIELDS = {"name", "seed", "scene", "target_scene", "source_shift", "target_shift", "arch", "sampling",
                 "train", "adapt", "seeds", "lr_sweep"}


@dataclass
class BenchConfig:
    name: str = "aerial_to_street"
    seed: int = 42
    scene: SceneSpec = field(default_factory=SceneSpec)
    target_scene: Optional[SceneSpec] = None       # defaults to ``scene``
    source_shift: ShiftSpec = field(default_factory=ShiftSpec)
    target_shift: ShiftSpec = field(default_factory=ShiftSpec)
    arch: Arch = field(default_factory=Arch)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    train: dict = field(default_factory=lambda: {"epochs": 10, "lr": 1e-3, "seed": 0})
    adapt: dict = field(default_factory=dict)
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    lr_sweep: List[float] = field(default_factory=lambda: [1e-5, 5e-5, 1e-4, 5e-4, 1e-3])

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchConfig":
        extra = set(doc) - _BENCH_FIELDS
        if extra:
            raise ValueError(f"unknown benchmark fields {sorted(extra)}")
        kw = dict(doc)
        kw["scene"] = SceneSpec.from_dict(doc.get("scene", {}))
        if doc.get("target_scene") is not None:
            kw["target_scene"] = SceneSpec.from_dict(doc["target_scene"])
        kw["source_shift"] = ShiftSpec.from_dict(doc.get("source_shift", {}))
        kw["target_shift"] = ShiftSpec.from_dict(doc.get("target_shift", {}))
        kw["arch"] = Arch(**doc.get("arch", {}))
        kw["sampling"] = SamplingConfig.from_dict(doc.get("sampling", {}))
        cfg = cls(**kw)
        cfg.adapt_config(Mode.FULL, 0)   # validates the adapt block early
        return cfg

    def to_dict(self):
        return {"name": self.name, "seed": self.seed, "scene": self.scene.to_dict(),
                "target_scene": None if self.target_scene is None else self.target_scene.to_dict(),
                "source_shift": self.source_shift.to_dict(), "target_shift": self.target_shift.to_dict(),
                "arch": self.arch.to_dict(), "sampling": dict(vars(self.sampling)),
                "train": dict(self.train), "adapt": dict(self.adapt), "seeds": list(self.seeds),
                "lr_sweep": list(self.lr_sweep)}

    def adapt_config(self, mode, seed, **overrides) -> AdaptConfig:
        kw = dict(self.adapt)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return AdaptConfig(mode=Mode(mode), seed=seed, **kw)


def canonical_config() -> BenchConfig:
    text = resources.files("pcltta.data.bench").joinpath("canonical.json").read_text("utf-8")
    return BenchConfig.from_dict(json.loads(text))


def load_bench_config(path=None) -> BenchConfig:
    if path is None:
        return canonical_config()
    with open(path, "r", encoding="utf-8") as fh:
        return BenchConfig.from_dict(json.load(fh))


def make_domains(cfg: BenchConfig, seed: Optional[int] = None):
    """Source and target clouds; the target scene is drawn with ``seed + 1``."""
    seed = cfg.seed if seed is None else seed
    scene, normals = generate_scene_with_normals(cfg.scene, seed)
    source = apply_domain_shift(scene, cfg.source_shift, seed, normals)
    scene, normals = generate_scene_with_normals(cfg.target_scene or cfg.scene, seed + 1)
    target = apply_domain_shift(scene, cfg.target_shift, seed + 1, normals)
    source.num_classes = target.num_classes = len(CLASSES)
    return source, target


def train_model(cfg: BenchConfig, source: PointCloud):
    t = cfg.train
    net = init_network(cfg.arch, int(t.get("seed", 0)))
    trace = train_source(net, [source], int(t.get("epochs", 10)), float(t.get("lr", 1e-3)),
                         int(t.get("seed", 0)), cfg.sampling)
    return net, trace


@dataclass
class BenchAssets:
    cfg: BenchConfig
    source: PointCloud
    target: PointCloud
    net: SegNet
    trace: List[float]


def prepare(cfg: BenchConfig = None) -> BenchAssets:
    cfg = cfg or canonical_config()
    source, target = make_domains(cfg)
    net, trace = train_model(cfg, source)
    return BenchAssets(cfg, source, target, net, trace)


@dataclass
class RunResult:
    mode: str
    seed: int
    lr: float
    scores: Scores
    top_fraction: float       # share of points given the most frequent predicted class
    num_batches: int


def run_mode(assets: BenchAssets, mode, seed: int, lr: float = None, **overrides) -> RunResult:
    cfg = assets.cfg.adapt_config(mode, seed, lr=lr, **overrides)
    res = run_tta(assets.net, assets.target, cfg, assets.cfg.sampling)
    s = scores(accumulate_confusion(res.labels, assets.target.labels, assets.cfg.arch.num_classes))
    pred = res.labels[res.labels >= 0]
    top = np.bincount(pred, minlength=assets.cfg.arch.num_classes).max() / max(len(res.labels), 1)
    return RunResult(cfg.mode.value, seed, cfg.lr, s, float(top), res.num_batches)


def ablation(assets: BenchAssets, seed: int = None, modes: Sequence[str] = ABLATION_MODES) -> List[RunResult]:
    seed = assets.cfg.seed if seed is None else seed
    return [run_mode(assets, m, seed) for m in modes]


def lr_sweep(assets: BenchAssets, lrs: Sequence[float] = None, mode: str = "full",
             seed: int = None) -> List[RunResult]:
    seed = assets.cfg.seed if seed is None else seed
    lrs = sorted(assets.cfg.lr_sweep if lrs is None else lrs)
    return [run_mode(assets, mode, seed, lr=lr) for lr in lrs]


def seed_repetition(assets: BenchAssets, modes: Sequence[str] = ABLATION_MODES,
                    seeds: Sequence[int] = None) -> Dict[str, List[RunResult]]:
    seeds = assets.cfg.seeds if seeds is None else seeds
    return {m: [run_mode(assets, m, s) for s in seeds] for m in modes}


def summarize(runs: Sequence[RunResult]) -> dict:
    miou = np.array([100 * r.scores.miou for r in runs])
    oa = np.array([100 * r.scores.oa for r in runs])
    std = lambda a: float(a.std(ddof=1)) if len(a) > 1 else 0.0
    return {"miou_mean": float(miou.mean()), "miou_std": std(miou), "miou_median": float(np.median(miou)),
            "oa_mean": float(oa.mean()), "oa_std": std(oa), "n": len(runs)}


# -- rendering ----------------------------------------------------------------

def _table(header, rows):
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "| " + " | ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                                      for i, (c, w) in enumerate(zip(r, widths))) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([fmt(header), sep] + [fmt(r) for r in rows])


def _csv(header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _score_cells(s: Scores):
    return [("-" if np.isnan(v) else f"{100 * v:.2f}") for v in s.iou] + [f"{100 * s.miou:.2f}", f"{100 * s.oa:.2f}"]


def render_runs(runs: Sequence[RunResult], key: str, class_names=CLASSES):
    """Per-run table keyed by ``key`` ('mode' or 'lr'); returns (markdown, csv)."""
    header = [key.capitalize() if key != "lr" else "lr"] + list(class_names) + ["mIoU", "OA"]
    rows = [[(r.mode if key == "mode" else f"{r.lr:g}")] + _score_cells(r.scores) for r in runs]
    return _table(header, rows), _csv(header, rows)


def render_repetition(rep: Dict[str, List[RunResult]]):
    seeds = [r.seed for r in next(iter(rep.values()))]
    header = ["Mode"] + [f"seed {s}" for s in seeds] + ["mean", "std", "OA mean", "OA std"]
    rows = []
    for mode, runs in rep.items():
        s = summarize(runs)
        rows.append([mode] + [f"{100 * r.scores.miou:.2f}" for r in runs]
                    + [f"{s['miou_mean']:.2f}", f"{s['miou_std']:.2f}", f"{s['oa_mean']:.2f}", f"{s['oa_std']:.2f}"])
    return _table(header, rows), _csv(header, rows)
