"""Command-line entry point: ``cdet <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import loss as L
from .anchors import AnchorSpec, format_records, generate
from .data import SyntheticSpec, generate_dataset, load_annotations, load_dataset
from .errors import ConfigError, DataIOError, NumericAbort
from .evaluation import FP_TYPES, Dataset, evaluate
from .network import NetworkConfig
from .pipeline import (
    ABLATION_VARIANTS,
    Detector,
    TrainConfig,
    ablation_medians,
    format_ablation,
    format_detection,
    parse_detection,
    run_ablation,
    train,
)

log = logging.getLogger("cdet")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


# ---------------------------------------------------------------- configuration


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    eval: dict = field(default_factory=lambda: {"eleven_point": False, "similar_groups": None})

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "eval": dict(self.eval),
        }


SECTIONS = {"network": NetworkConfig, "train": TrainConfig, "data": SyntheticSpec}
EVAL_KEYS = ("eleven_point", "similar_groups")


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {unknown}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad {section} value: {exc}") from exc


def resolve_config(path: str | None, overrides: list[str]) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``section.key=value`` overrides."""
    raw: dict = {k: {} for k in (*SECTIONS, "eval")}
    if path:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise DataIOError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = sorted(set(loaded) - set(raw))
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        for k, v in loaded.items():
            if not isinstance(v, dict):
                raise ConfigError(f"config section {k!r} must be an object")
            raw[k].update(v)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in raw:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        try:
            raw[section][name] = json.loads(value)
        except json.JSONDecodeError:
            raw[section][name] = value
    bad_eval = sorted(set(raw["eval"]) - set(EVAL_KEYS))
    if bad_eval:
        raise ConfigError(f"unknown eval keys: {bad_eval}")
    cfg = RunConfig(
        _build(NetworkConfig, raw["network"], "network"),
        _build(TrainConfig, raw["train"], "train"),
        _build(SyntheticSpec, raw["data"], "data"),
    )
    cfg.eval.update(raw["eval"])
    return cfg


def resolve_seed(flag: int | None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get("CDET_SEED")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"CDET_SEED must be an integer, got {env!r}") from exc


def _similar_groups(cfg: RunConfig, num_classes: int):
    groups = cfg.eval.get("similar_groups")
    if groups is None:
        # every foreground class counts as similar to every other
        return [list(range(1, num_classes))]
    return groups


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    spec = cfg.data
    if args.count is not None:
        spec = replace(spec, image_count=args.count)
    anns = generate_dataset(spec, args.out, threads=args.threads)
    print(f"wrote {len(anns)} images to {args.out}")
    return 0


def _dump_assignments(det: Detector, images, anns, path) -> None:
    out = det.forward(images[:1])
    arm = None if out.arm is None else out.arm.value
    plans = L.plan_targets(arm, out.odm.value, det.anchors, [anns[0].ground_truth()], det.train_cfg.loss_config())
    with open(path, "w") as fh:
        for stage, assignment in (("arm", plans[0].arm), ("odm", plans[0].odm)):
            if assignment is None:
                continue
            for rec in assignment.records():
                fh.write(f"{stage}\t{rec}\n")


def cmd_train(args, cfg: RunConfig) -> int:
    tcfg = cfg.train
    if args.steps is not None:
        tcfg = replace(tcfg, max_steps=args.steps)
    if args.filter_positives is not None:
        tcfg = replace(tcfg, filter_positives=args.filter_positives)
    if args.variant:
        v = {x.name: x for x in ABLATION_VARIANTS}[args.variant]
        tcfg = replace(tcfg, filtering_enabled=v.filtering, cascade_enabled=v.cascade, tcb_enabled=v.tcb)
    images, anns = load_dataset(args.data)
    det = Detector(cfg.network, tcfg)
    det.initialize()
    if args.dump_assignments and len(anns):
        _dump_assignments(det, images, anns, args.dump_assignments)
    log_fh = open(args.log, "w") if args.log else None
    try:

        def on_step(rec):
            if log_fh:
                log_fh.write(rec.to_json() + "\n")
            if rec.step % 100 == 0:
                log.info("step %d lr %.5f loss %.4f", rec.step, rec.lr, rec.loss.total)

        train(det, images, anns, on_step=on_step, initialize=False)
    finally:
        if log_fh:
            log_fh.close()
    det.save(args.out)
    print(f"saved checkpoint {args.out} after {tcfg.max_steps} steps")
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    det = Detector.load(args.checkpoint)
    images, anns = load_dataset(args.data)
    ids = [a.image_id for a in anns]
    chunks = [(s, min(s + args.batch, len(ids))) for s in range(0, len(ids), args.batch)]

    def run(chunk):
        s, e = chunk
        return det.infer(images[s:e], theta=args.theta)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    n = 0
    with open(args.out, "w") as fh:
        for (s, _), per_image in zip(chunks, results):
            for k, dets in enumerate(per_image):
                for d in dets:
                    fh.write(format_detection(ids[s + k], d) + "\n")
                    n += 1
    print(f"wrote {n} detections for {len(ids)} images to {args.out}")
    return 0


def load_detections(path) -> list[tuple[int, int, float, tuple]]:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataIOError(f"cannot read detections {path}: {exc}") from exc
    out = []
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            iid, d = parse_detection(line)
        except ValueError as exc:
            raise DataIOError(f"{path}:{no}: malformed detection line ({exc})") from exc
        out.append((iid, d.class_id, d.score, d.box.as_tuple()))
    return out


def _eval_inputs(args, cfg: RunConfig):
    anns = load_annotations(args.annotations)
    ds = Dataset.build(load_detections(args.detections), anns)
    num_classes = max([cfg.network.num_classes, *(c + 1 for c in ds.classes())])
    return ds, _similar_groups(cfg, num_classes)


def cmd_eval(args, cfg: RunConfig) -> int:
    ds, groups = _eval_inputs(args, cfg)
    eleven = args.eleven_point or bool(cfg.eval.get("eleven_point"))
    report = evaluate(ds, groups, eleven_point=eleven)
    names = {i + 1: n for i, n in enumerate(cfg.data.classes)}
    text = report.format(names)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.pr_dir:
        Path(args.pr_dir).mkdir(parents=True, exist_ok=True)
        for c in sorted(report.curves):
            with open(Path(args.pr_dir) / f"pr_class{c}.tsv", "w") as fh:
                fh.write("recall\tprecision\n" + report.curve_points(c))
    return 0


def cmd_analyze(args, cfg: RunConfig) -> int:
    ds, groups = _eval_inputs(args, cfg)
    report = evaluate(ds, groups)
    lines = ["class\tdetections\tTP\tFP\t" + "\t".join(f"{t}%" for t in FP_TYPES)]
    totals = {t: 0 for t in FP_TYPES}
    for c in sorted(report.fp_counts):
        counts = report.fp_counts[c]
        fp = sum(counts.values())
        tp = int(report.curves[c].tp.sum())
        for t in FP_TYPES:
            totals[t] += counts[t]
        shares = "\t".join(f"{100 * counts[t] / fp:.1f}" if fp else "0.0" for t in FP_TYPES)
        lines.append(f"{c}\t{tp + fp}\t{tp}\t{fp}\t{shares}")
    fp_all = sum(totals.values())
    shares = "\t".join(f"{100 * totals[t] / fp_all:.1f}" if fp_all else "0.0" for t in FP_TYPES)
    lines.append(f"all\t-\t-\t{fp_all}\t{shares}")
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


def cmd_anchors(args, cfg: RunConfig) -> int:
    size = (args.size, args.size) if args.size else cfg.network.image_size
    spec = AnchorSpec(size, cfg.network.strides, cfg.network.scale_multiplier, cfg.network.aspect_ratios)
    grid = generate(spec)
    if args.count_only:
        print(len(grid))
        return 0
    out = sys.stdout
    for rec in format_records(grid):
        out.write(rec + "\n")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    tcfg = cfg.train
    if args.steps is not None:
        tcfg = replace(tcfg, max_steps=args.steps)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [tcfg.seed]
    train_data = load_dataset(args.train_data)
    test_data = load_dataset(args.test_data)

    def report(r):
        print(f"{r.variant}\tseed {r.seed}\tmAP@0.5 {100 * r.map50:.2f}\tloss {r.final_loss:.4f}", file=sys.stderr)

    groups = _similar_groups(cfg, cfg.network.num_classes)
    results = run_ablation(cfg.network, tcfg, train_data, test_data, seeds, on_result=report, similar_groups=groups)
    table = format_ablation(results)
    sys.stdout.write(table)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    med = ablation_medians(results)
    log.info("medians %s", json.dumps(med, sort_keys=True))
    return 0


def _timeit(fn, reps: int) -> dict[str, float]:
    fn()  # warm-up
    times = []
    for _ in range(reps):
        t = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t) * 1000.0)
    arr = np.array(times)
    return {"mean": float(arr.mean()), "p50": float(np.percentile(arr, 50)), "p99": float(np.percentile(arr, 99))}


def cmd_bench(args, cfg: RunConfig) -> int:
    from . import microdiff as md
    from .geometry import decode, iou_matrix, nms_indices

    rng = np.random.default_rng(cfg.train.seed)
    if args.checkpoint:
        det = Detector.load(args.checkpoint)
    else:
        det = Detector(cfg.network, cfg.train)
        det.initialize()
    w, h = det.net_cfg.image_size
    images = rng.integers(0, 256, (args.batch, h, w)).astype(np.uint8)
    boxes = np.sort(rng.uniform(0, w, (1000, 2, 2)), axis=1).transpose(0, 2, 1).reshape(-1, 4)[:, [0, 2, 1, 3]]
    scores = rng.random(1000)
    x = md.Tensor(rng.standard_normal((args.batch, 16, h // 4, w // 4)).astype(np.float32))
    wt = md.Tensor(rng.standard_normal((32, 16, 3, 3)).astype(np.float32))
    deltas = rng.normal(0, 1, (len(det.anchors), 4))
    cases = {
        "iou_matrix_1000x1000": lambda: iou_matrix(boxes, boxes),
        "nms_1000": lambda: nms_indices(boxes, scores, 0.45, 200),
        "decode_all_anchors": lambda: decode(det.anchors, deltas),
        "conv3x3_16to32": lambda: md.conv3x3(x, wt, None),
        "forward": lambda: det.forward(images),
        "infer_end_to_end": lambda: det.infer(images),
    }
    print(f"op\treps\tmean_ms\tp50_ms\tp99_ms\t(batch {args.batch})")
    for name, fn in cases.items():
        st = _timeit(fn, args.reps)
        print(f"{name}\t{args.reps}\t{st['mean']:.3f}\t{st['p50']:.3f}\t{st['p99']:.3f}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="JSON run configuration with sections network/train/data/eval")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (VALUE parsed as JSON when possible); repeatable",
    )
    common.add_argument("--seed", type=int, help="seed for data and training (fallback: $CDET_SEED, then config)")
    common.add_argument(
        "--threads", type=int, default=os.cpu_count() or 1, help="worker threads for generation and inference (default: cores)"
    )
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="stderr log verbosity")

    parser = argparse.ArgumentParser(prog="cdet", description="Two-step anchor-refinement detector toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}", help="print version and exit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic shapes dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, help="number of images (overrides data.image_count)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a detector and write a checkpoint")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--steps", type=int, help="number of SGD steps (overrides train.max_steps)")
    p.add_argument(
        "--filter-positives",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="drop positive anchors whose ARM background confidence exceeds theta from ODM training (default: keep them)",
    )
    p.add_argument("--variant", choices=[v.name for v in ABLATION_VARIANTS], help="train one ablation variant")
    p.add_argument("--log", metavar="FILE", help="write one JSON loss record per step")
    p.add_argument("--dump-assignments", metavar="FILE", help="debug: write anchor assignments for the first image")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="detect objects in a dataset")
    p.add_argument("--checkpoint", required=True, help="checkpoint from train")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="detections file (image, class, score, box per line)")
    p.add_argument("--theta", type=float, help="negative-anchor filter threshold (default: from checkpoint)")
    p.add_argument("--batch", type=int, default=16, help="images per forward pass")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score detections against annotations")
    p.add_argument("--detections", required=True, help="detections file from infer")
    p.add_argument("--annotations", required=True, help="annotations.jsonl")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--eleven-point", action="store_true", help="use 11-point interpolated AP")
    p.add_argument("--pr-dir", metavar="DIR", help="write per-class precision/recall points as TSV files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", parents=[common], help="false-positive breakdown (Loc/Sim/Oth/BG)")
    p.add_argument("--detections", required=True, help="detections file from infer")
    p.add_argument("--annotations", required=True, help="annotations.jsonl")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("anchors", parents=[common], help="print the anchor grid, one record per line")
    p.add_argument("--size", type=int, help="square image side (default: network.image_size)")
    p.add_argument("--count-only", action="store_true", help="print only the number of anchors")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("ablate", parents=[common], help="train the four ablation variants and tabulate mAP")
    p.add_argument("--train-data", required=True, help="training dataset directory")
    p.add_argument("--test-data", required=True, help="held-out dataset directory")
    p.add_argument("--steps", type=int, help="steps per run (overrides train.max_steps)")
    p.add_argument("--seeds", help="comma-separated training seeds (default: train.seed)")
    p.add_argument("--out", help="also write the table to this file")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", parents=[common], help="latency of core ops and end-to-end inference")
    p.add_argument("--reps", type=int, default=20, help="timed repetitions per case")
    p.add_argument("--batch", type=int, default=1, help="images per inference call")
    p.add_argument("--checkpoint", help="benchmark this checkpoint instead of a fresh initialization")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = resolve_config(args.config, args.overrides)
        seed = resolve_seed(args.seed)
        if seed is not None:
            cfg.train = replace(cfg.train, seed=seed)
            cfg.data = replace(cfg.data, seed=seed)
        log.info("resolved config %s", json.dumps(cfg.to_dict(), sort_keys=True))
        return args.func(args, cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericAbort as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NUMERIC
    except (DataIOError, OSError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO

