"""``pcltta`` command line: synth | train | adapt | eval | report.

Every command writes ``manifest.json`` into its ``--out`` directory, also
when it fails. Exit codes: 0 ok, 2 user/config error, 3 IO error,
4 numerical abort.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .adaptation import AdaptConfig, Mode, SamplingConfig, run_tta, train_source
from .errors import InvalidState, LabelMapError, NumericalAbort
from .io import FormatError, load_checkpoint, load_cloud, save_checkpoint, save_pcb
from .labelspace import identity_map, load_label_map, remap_labels
from .metrics import accumulate_confusion, format_table, report_dict, scores
from .network import Arch, init_network
from .pointcloud import PointCloud
from .report import (ABLATION_MODES, BenchConfig, load_bench_config, make_domains, prepare,
                     render_repetition, render_runs, ablation, lr_sweep, seed_repetition, summarize)
from .synthgen import CLASSES, SceneSpec, ShiftSpec

log = logging.getLogger("pcltta")

EXIT_OK, EXIT_USER, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UserError(Exception):
    """Bad flags, config or input content."""


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    def __init__(self, command, args, out_dir):
        self.doc = {"command": command, "version": __version__, "status": "running",
                    "config": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)},
                    "seed": getattr(args, "seed", None), "inputs": {}, "outputs": [],
                    "duration_s": None, "error": None}
        self.out_dir = Path(out_dir)
        self.t0 = time.perf_counter()

    def add_input(self, path):
        """Digest an input before it is read for processing."""
        try:
            self.doc["inputs"][str(path)] = sha256(path)
        except FileNotFoundError:
            raise UserError(f"input file not found: {path}") from None

    def add_output(self, path):
        self.doc["outputs"].append(str(path))

    def set(self, key, value):
        self.doc[key] = value

    def write(self, status, error=None):
        self.doc["status"] = status
        self.doc["error"] = error
        self.doc["duration_s"] = round(time.perf_counter() - self.t0, 3)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            with open(self.out_dir / "manifest.json", "w", encoding="utf-8") as fh:
                json.dump(self.doc, fh, indent=2, sort_keys=True, default=str)
                fh.write("\n")
        except OSError as exc:
            print(f"pcltta: could not write manifest: {exc}", file=sys.stderr)


def _read_json(path, manifest=None):
    if manifest is not None:
        manifest.add_input(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UserError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}: malformed JSON ({exc})") from None


def _bench(args, manifest) -> BenchConfig:
    if args.config:
        try:
            return BenchConfig.from_dict(_read_json(args.config, manifest))
        except (TypeError, ValueError) as exc:
            raise UserError(f"{args.config}: {exc}") from None
    return load_bench_config()


def _load_input_cloud(path, manifest) -> PointCloud:
    manifest.add_input(path)
    return load_cloud(path)


def _label_map(path, manifest, num_classes):
    if path is None:
        return identity_map(list(CLASSES[:num_classes]) if num_classes <= len(CLASSES)
                            else [f"class{i}" for i in range(num_classes)])
    manifest.add_input(path)
    return load_label_map(path)


def _write_text(path, text, manifest):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    manifest.add_output(path)


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()] if text else []


# -- commands -----------------------------------------------------------------

def cmd_synth(args, manifest, out):
    cfg = _bench(args, manifest)
    if args.spec:
        cfg.scene = SceneSpec.from_dict(_read_json(args.spec, manifest))
        cfg.target_scene = None
    if args.shift:
        cfg.target_shift = ShiftSpec.from_dict(_read_json(args.shift, manifest))
    seed = cfg.seed if args.seed is None else args.seed
    manifest.set("seed", seed)
    manifest.set("bench", cfg.to_dict())
    source, target = make_domains(cfg, seed)
    for name, cloud in (("source.pcb", source), ("target.pcb", target)):
        save_pcb(cloud, out / name)
        manifest.add_output(out / name)
    print(f"source {len(source)} points, target {len(target)} points -> {out}")


def cmd_train(args, manifest, out):
    cfg = _bench(args, manifest)
    cloud = _load_input_cloud(args.cloud, manifest)
    if cloud.labels is None:
        raise UserError(f"{args.cloud}: training needs a labeled cloud")
    lmap = _label_map(args.labelmap, manifest, cfg.arch.num_classes)
    cloud.labels = remap_labels(cloud.labels, lmap)
    arch = Arch(in_features=3 if args.no_colors else 6, num_classes=lmap.num_classes,
                encoder=_ints(args.encoder) or cfg.arch.encoder,
                head=_ints(args.head) if args.head is not None else cfg.arch.head)
    if arch.in_features == 6 and cloud.colors is None:
        raise UserError(f"{args.cloud} has no colors; pass --no-colors")
    seed = int(cfg.train.get("seed", 0)) if args.seed is None else args.seed
    epochs = int(cfg.train.get("epochs", 10)) if args.epochs is None else args.epochs
    lr = float(cfg.train.get("lr", 1e-3)) if args.lr is None else args.lr
    manifest.set("seed", seed)
    net = init_network(arch, seed)
    trace = train_source(net, [cloud], epochs, lr, seed, cfg.sampling) if epochs > 0 else []
    if epochs == 0:
        net.round_to_float32()
    extra = {"sampling": dict(vars(cfg.sampling)), "classes": list(lmap.classes), "label_map": lmap.name,
             "epochs": epochs, "lr": lr, "seed": seed, "loss_trace": trace}
    path = out / "model.ttac"
    save_checkpoint(net, path, extra)
    manifest.add_output(path)
    manifest.set("final_loss", trace[-1] if trace else None)
    print(f"final loss {trace[-1]:.6f}" if trace else "final loss n/a (0 epochs)")


def cmd_adapt(args, manifest, out):
    manifest.add_input(args.checkpoint)
    net, header = load_checkpoint(args.checkpoint)
    sampling = SamplingConfig.from_dict(header.get("extra", {}).get("sampling", {}))
    adapt = {}
    if args.config:
        cfg = _bench(args, manifest)
        sampling, adapt = cfg.sampling, dict(cfg.adapt)
    cloud = _load_input_cloud(args.cloud, manifest)
    if net.arch.in_features == 6 and cloud.colors is None:
        raise UserError(f"checkpoint expects colors but {args.cloud} has none")
    for key, value in (("rho", args.rho), ("lr", args.lr), ("lambda_pl", args.lambda_pl),
                       ("param_subset", args.subset), ("jitter_sigma", args.jitter)):
        if value is not None:
            adapt[key] = value
    seed = 0 if args.seed is None else args.seed
    acfg = AdaptConfig(mode=Mode(args.mode), seed=seed, **adapt)
    manifest.set("seed", seed)
    manifest.set("adapt_config", acfg.to_dict())
    manifest.set("sampling", dict(vars(sampling)))
    res = run_tta(net, cloud, acfg, sampling, copy=False)

    pred = PointCloud(cloud.positions, None, res.labels)
    save_pcb(pred, out / "predictions.pcb")
    manifest.add_output(out / "predictions.pcb")
    extra = dict(header.get("extra", {}))
    extra["adapted"] = acfg.to_dict()
    save_checkpoint(res.net, out / "adapted.ttac", extra)
    manifest.add_output(out / "adapted.ttac")
    lines = "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in res.log)
    _write_text(out / "losses.jsonl", lines, manifest)
    manifest.set("num_batches", res.num_batches)
    print(f"{acfg.mode.value}: {res.num_batches} batches, predictions -> {out / 'predictions.pcb'}")


def cmd_eval(args, manifest, out):
    pred = _load_input_cloud(args.pred, manifest)
    gt = _load_input_cloud(args.gt, manifest)
    if pred.labels is None or gt.labels is None:
        raise UserError("both prediction and ground-truth files need labels")
    if len(pred) != len(gt):
        raise UserError(f"{len(pred)} predictions for {len(gt)} ground-truth points")
    k = args.num_classes
    if args.labelmap:
        lmap = _label_map(args.labelmap, manifest, k)
    else:
        k = k or max(int(pred.labels.max()), int(gt.labels.max()), len(CLASSES) - 1) + 1
        lmap = _label_map(None, manifest, k)
    gt_labels = remap_labels(gt.labels, lmap)
    cm = accumulate_confusion(pred.labels, gt_labels, lmap.num_classes)
    rep = report_dict(cm, lmap.classes)
    rep["confusion"] = cm.counts.tolist()
    rep["unpredicted"] = cm.unpredicted.tolist()
    _write_text(out / "report.json", json.dumps(rep, indent=2, sort_keys=True) + "\n", manifest)
    table = format_table([(args.name, scores(cm))], lmap.classes)
    _write_text(out / "report.txt", table + "\n", manifest)
    manifest.set("oa", rep["oa"])
    manifest.set("miou", rep["miou"])
    print(table)


def cmd_report(args, manifest, out):
    cfg = _bench(args, manifest)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.lr is not None:
        cfg.adapt["lr"] = args.lr
    if args.seeds:
        cfg.seeds = _ints(args.seeds)
    what = {w.strip() for w in args.what.split(",")}
    bad = what - {"ablation", "lr", "seeds"}
    if bad:
        raise UserError(f"unknown report parts {sorted(bad)}; choose from ablation, lr, seeds")
    manifest.set("bench", cfg.to_dict())
    assets = prepare(cfg)
    print(f"source model trained, final loss {assets.trace[-1]:.4f}" if assets.trace else "no training")
    sections = []
    if "ablation" in what:
        md, text = render_runs(ablation(assets), "mode")
        _write_text(out / "ablation.csv", text, manifest)
        sections.append(f"## Mode ablation (seed {cfg.seed})\n\n{md}\n")
    if "lr" in what:
        md, text = render_runs(lr_sweep(assets), "lr")
        _write_text(out / "lr_sweep.csv", text, manifest)
        sections.append(f"## Learning-rate sweep, mode full (seed {cfg.seed})\n\n{md}\n")
    if "seeds" in what:
        rep = seed_repetition(assets, ABLATION_MODES, cfg.seeds)
        md, text = render_repetition(rep)
        _write_text(out / "seeds.csv", text, manifest)
        manifest.set("seed_summary", {m: summarize(r) for m, r in rep.items()})
        sections.append(f"## Seed repetition (mIoU %)\n\n{md}\n")
    doc = f"# {cfg.name}\n\n" + "\n".join(sections)
    _write_text(out / "report.md", doc, manifest)
    print(doc)


# -- plumbing -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="pcltta", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="benchmark JSON (default: shipped canonical config)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("synth", help="generate source/target synthetic clouds")
    common(s)
    s.add_argument("--spec", help="SceneSpec JSON used for both domains")
    s.add_argument("--shift", help="ShiftSpec JSON overriding the config target shift")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="supervised source training")
    common(s)
    s.add_argument("--cloud", required=True)
    s.add_argument("--labelmap", help="label map JSON applied to the cloud labels")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--encoder", help="comma separated widths, e.g. 32,64,128")
    s.add_argument("--head", help="comma separated widths, e.g. 128,64")
    s.add_argument("--no-colors", action="store_true", help="xyz-only network")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("adapt", help="test-time adaptation and prediction")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cloud", required=True)
    s.add_argument("--mode", default="full", choices=[m.value for m in Mode])
    s.add_argument("--rho", type=float)
    s.add_argument("--lr", type=float)
    s.add_argument("--lambda-pl", dest="lambda_pl", type=float)
    s.add_argument("--subset", choices=["bn", "fe", "all"])
    s.add_argument("--jitter", type=float, help="augmentation noise sigma (m)")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("eval", help="score predictions against ground truth")
    common(s)
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--labelmap")
    s.add_argument("--num-classes", type=int)
    s.add_argument("--name", default="prediction", help="row label in report.txt")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="mode ablation, lr sweep and seed repetition")
    common(s)
    s.add_argument("--what", default="ablation,lr,seeds")
    s.add_argument("--seeds", help="comma separated repetition seeds")
    s.add_argument("--lr", type=float, help="adaptation lr for ablation/seed runs")
    s.set_defaults(func=cmd_report)
    return p


def _threads():
    raw = os.environ.get("PCLTTA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UserError(f"PCLTTA_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UserError(f"PCLTTA_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    manifest = RunManifest(args.command, args, out)
    code, status, error = EXIT_OK, "ok", None
    try:
        threads = _threads()
        manifest.set("threads", threads)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {out}: {exc}") from exc
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=threads), np.errstate(over="ignore", invalid="ignore"):
            args.func(args, manifest, out)
    except NumericalAbort as exc:
        code, status, error = EXIT_NUMERIC, "numerical_abort", str(exc)
    except (UserError, LabelMapError, InvalidState, KeyError, TypeError) as exc:
        code, status, error = EXIT_USER, "user_error", str(exc)
    except FormatError as exc:
        code, status, error = EXIT_IO, "io_error", str(exc)
    except FileNotFoundError as exc:
        code, status, error = EXIT_USER, "user_error", f"file not found: {exc.filename}"
    except OSError as exc:
        code, status, error = EXIT_IO, "io_error", str(exc)
    except ValueError as exc:
        code, status, error = EXIT_USER, "user_error", str(exc)
    if error:
        print(f"pcltta {args.command}: {error}", file=sys.stderr)
    manifest.write(status, error)
    return code


if __name__ == "__main__":
    sys.exit(main())
