"""Command-line entry point: ``rinn {gen,train,eval,detect,montage,oneshot}``.

Exit codes: 0 success, 2 usage or input error, 3 stage-order or divergence error.
Every file a command writes lands under ``--out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import dataset as ds
from .errors import DivergenceError, RinnError, StageOrderError
from .evaluation import (
    LinearProbe,
    accuracy,
    angle_bin,
    bin_distance,
    detect,
    f1,
    format_pr_csv,
    oneshot_predict,
    oneshot_train,
    pr_curve,
)
from .network import forward_pose, load_model, nearest_cell, save_model
from .tensor import affine_resample
from .training import STAGES, TrainConfig, append_run_log, run_stage

log = logging.getLogger("rinn")

EXIT_OK, EXIT_USAGE, EXIT_PIPELINE = 0, 2, 3


class UsageError(Exception):
    """Bad flags or unusable inputs; maps to exit code 2."""


# config ---------------------------------------------------------------------------


def _coerce(name, default, text):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"bad value for {name}: {text!r}") from None
    return text


def parse_config(lines, base: dict | None = None) -> dict:
    """Parse flat ``key=value`` lines into TrainConfig overrides; unknown keys are rejected."""
    defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    out = dict(base or {})
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise UsageError(f"unknown config key {key!r}")
        out[key] = _coerce(key, defaults[key], value)
    return out


def build_config(args) -> TrainConfig:
    overrides = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                overrides = parse_config(f)
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e.strerror}") from None
    overrides = parse_config(args.set or [], overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return TrainConfig(**overrides)


# helpers --------------------------------------------------------------------------


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write_text(directory, name, text) -> str:
    path = os.path.join(directory, name)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return path


def _load_split(directory, what):
    if not os.path.isfile(os.path.join(directory, "manifest.txt")):
        raise UsageError(f"{what} directory {directory} has no manifest.txt")
    records, images = ds.load_split(directory)
    if not records:
        raise UsageError(f"{what} directory {directory} is empty")
    return records, images


def _group_scenes(records, images):
    # detection manifests list one record per placement; group them by image
    scenes = {}
    for r, img in zip(records, images):
        scenes.setdefault(r.path, (img, []))[1].append(r)
    return [(path, img, recs) for path, (img, recs) in scenes.items()]


def parse_sweep(text):
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"--sweep expects lo:hi:step, got {text!r}") from None
    if step <= 0 or hi < lo or lo < 0 or hi > 1:
        raise UsageError(f"--sweep range {text!r} must satisfy 0 <= lo <= hi <= 1 and step > 0")
    count = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + k * step, 10) for k in range(count)]


def svg_plot(rows) -> str:
    """Minimal precision-recall plot: axes, ticks and one polyline."""
    size, pad = 320, 40
    span = size - 2 * pad

    def xy(recall, precision):
        return pad + recall * span, size - pad - precision * span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{size - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{size - pad}" stroke="black"/>',
    ]
    for k in range(6):
        v = k / 5
        x, _ = xy(v, 0)
        _, y = xy(0, v)
        parts.append(f'<line x1="{x:.2f}" y1="{size - pad}" x2="{x:.2f}" y2="{size - pad + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.2f}" y="{size - pad + 16}" font-size="10" text-anchor="middle">{v:.1f}</text>')
        parts.append(f'<line x1="{pad - 4}" y1="{y:.2f}" x2="{pad}" y2="{y:.2f}" stroke="black"/>')
        parts.append(f'<text x="{pad - 6}" y="{y + 3:.2f}" font-size="10" text-anchor="end">{v:.1f}</text>')
    parts.append(f'<text x="{size / 2}" y="{size - 6}" font-size="11" text-anchor="middle">recall</text>')
    parts.append(f'<text x="12" y="{size / 2}" font-size="11" text-anchor="middle" '
                 f'transform="rotate(-90 12 {size / 2})">precision</text>')
    pts = " ".join("{:.2f},{:.2f}".format(*xy(r, p)) for _, p, r in rows)
    parts.append(f'<polyline points="{pts}" fill="none" stroke="blue" stroke-width="1.5"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def montage(scores, threshold: float = 0.8) -> np.ndarray:
    """Tile a PoseMap ``[h, w, p, C]``: rows are classes, columns orientations.

    Tiles are separated by 1-px lines of value 128. The global argmax cell gets
    a 1-px border of 255 when its probability reaches ``threshold``.
    """
    h, w, p, c = scores.shape
    out = np.full((c * (h + 1) + 1, p * (w + 1) + 1), 128, dtype=np.uint8)
    vals = np.clip(np.rint(scores * 255.0), 0, 255).astype(np.uint8)
    for k in range(c):
        for t in range(p):
            y0, x0 = 1 + k * (h + 1), 1 + t * (w + 1)
            out[y0:y0 + h, x0:x0 + w] = vals[:, :, t, k]
    flat = np.transpose(scores, (3, 0, 1, 2))
    k, i, j, t = np.unravel_index(int(np.argmax(flat)), flat.shape)
    if scores[i, j, t, k] >= threshold:
        y0, x0 = 1 + k * (h + 1), 1 + t * (w + 1)
        for y in range(i - 1, i + 2):
            for x in range(j - 1, j + 2):
                if (y, x) != (i, j) and 0 <= y < h and 0 <= x < w:
                    out[y0 + y, x0 + x] = 255
    return out


def _write_pgm_bytes(img_u8, path):
    with open(path, "wb") as f:
        f.write(f"P5\n{img_u8.shape[1]} {img_u8.shape[0]}\n255\n".encode("ascii"))
        f.write(img_u8.tobytes())


# commands -------------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.canvas is not None and args.canvas < 1:
        raise UsageError("--canvas must be a positive integer")
    if args.test is not None and args.test < 1:
        raise UsageError("--test must be at least 1")
    if args.scenes is not None and args.scenes < 1:
        raise UsageError("--scenes must be at least 1")
    out = _out_dir(args)
    seed = 0 if args.seed is None else args.seed
    want_train = args.train or (args.test is None and args.scenes is None)
    if want_train:
        d = os.path.join(out, "train")
        os.makedirs(d, exist_ok=True)
        records, images = ds.gen_train_set()
        for r, img in zip(records, images):
            ds.write_pgm(img, os.path.join(d, r.path))
        ds.write_manifest(records, os.path.join(d, "manifest.txt"))
        print(f"train: {len(records)} images in {d}")
    if args.test is not None:
        d = os.path.join(out, "test")
        os.makedirs(d, exist_ok=True)
        records, images = ds.gen_test_set(args.test, args.canvas or 64, seed=seed)
        for r, img in zip(records, images):
            ds.write_pgm(img, os.path.join(d, r.path))
        ds.write_manifest(records, os.path.join(d, "manifest.txt"))
        print(f"test: {len(records)} images in {d}")
    if args.scenes is not None:
        d = os.path.join(out, "scenes")
        os.makedirs(d, exist_ok=True)
        records = []
        for s in range(args.scenes):
            name = f"scene_{s:04d}.pgm"
            scene = ds.gen_detection_scene(2, args.canvas or 128, seed=[seed, s], name=name)
            ds.write_pgm(scene.canvas, os.path.join(d, name))
            records += scene.placements
        ds.write_manifest(records, os.path.join(d, "manifest.txt"))
        print(f"scenes: {args.scenes} images in {d}")
    return EXIT_OK


def _train_images(args):
    if not args.data:
        return None
    records, images = _load_split(args.data, "training")
    by_class = {}
    for r, img in zip(records, images):
        by_class.setdefault(r.class_id, img)
    if sorted(by_class) != list(range(ds.CLASS_COUNT)):
        raise UsageError(f"training data must hold one image for each of the {ds.CLASS_COUNT} classes")
    return [by_class[k] for k in range(ds.CLASS_COUNT)]


def cmd_train(args) -> int:
    config = build_config(args)
    images = _train_images(args)
    model = load_model(args.resume) if args.resume else None
    if args.stage == "all":
        done = [] if model is None else model.stages_done()
        stages = [s for s in STAGES if s not in done]
    else:
        stages = [args.stage]
    out = _out_dir(args)
    log_path = os.path.join(out, "run.log")
    for name in stages:
        model, report = run_stage(name, model, config, images)
        append_run_log(log_path, report)
        acc = report.train_accuracy
        print(f"stage {name}: train_accuracy={'n/a' if acc != acc else f'{acc:.6f}'} "
              f"wall_time={report.wall_time:.1f}s converged={str(report.converged).lower()}")
    path = os.path.join(out, "model.rinn")
    save_model(model, path)
    print(f"model: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    if args.data:
        records, images = _load_split(args.data, "test")
    else:
        records, images = ds.gen_test_set(args.test or 1000, args.canvas or 64,
                                          seed=0 if args.seed is None else args.seed)
    report = accuracy(model, records, images)
    text = "\n".join(report.lines()) + "\n"
    _write_text(_out_dir(args), "eval.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_detect(args) -> int:
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError("--threshold must lie in [0, 1]")
    model = load_model(args.model)
    if args.data:
        scenes = _group_scenes(*_load_split(args.data, "scene"))
    else:
        seed = 0 if args.seed is None else args.seed
        scenes = []
        for s in range(args.scenes or 50):
            name = f"scene_{s:04d}.pgm"
            sc = ds.gen_detection_scene(2, args.canvas or 128, seed=[seed, s], name=name)
            scenes.append((name, sc.canvas, sc.placements))
    thresholds = parse_sweep(args.sweep) if args.sweep else [args.threshold]
    if args.threshold not in thresholds:
        thresholds = sorted(thresholds + [args.threshold])
    maps = [(path, forward_pose(model, img), truths) for path, img, truths in scenes]
    lines = []
    step = 360.0 / model.n
    for path, pm, _ in maps:
        for d in detect(pm, args.threshold, args.radius, model):
            lines.append(json.dumps({
                "path": path, "class_id": d.class_id, "score": round(d.score, 6),
                "i": d.cell[0], "j": d.cell[1], "bin": d.orientation_bin,
                "angle_deg": d.orientation_bin * step, "cy": d.center[0], "cx": d.center[1],
            }))
    out = _out_dir(args)
    _write_text(out, "detections.txt", "".join(l + "\n" for l in lines))
    rows = pr_curve([(pm, truths) for _, pm, truths in maps], thresholds, model, args.radius)
    _write_text(out, "pr.csv", format_pr_csv(rows))
    _write_text(out, "pr.svg", svg_plot(rows))
    best = max(rows, key=lambda r: (f1(r[1], r[2]), -abs(r[0] - args.threshold)))
    at = next(r for r in rows if r[0] == args.threshold)
    print(f"detections={len(lines)} threshold={args.threshold:.6f} f1={f1(at[1], at[2]):.6f}")
    print(f"best_threshold={best[0]:.6f} best_f1={f1(best[1], best[2]):.6f}")
    return EXIT_OK


def cmd_montage(args) -> int:
    model = load_model(args.model)
    try:
        img = ds.read_pgm(args.image)
    except OSError as e:
        raise UsageError(f"cannot read image {args.image}: {e.strerror}") from None
    pm = forward_pose(model, img)
    path = os.path.join(_out_dir(args), "montage.pgm")
    _write_pgm_bytes(montage(pm.scores, args.threshold), path)
    print(f"montage: {path} max_probability={pm.scores.max():.6f}")
    return EXIT_OK


def _support(args):
    """Support image, its pose record and the upright symbol drawing."""
    if args.support is None:
        glyph = ds.rasterize_novel_glyph(args.novel)
        c = (64 - 1) / 2.0
        record = ds.SampleRecord("support.pgm", -1, c, c, 0.0)
        return ds.render_sample(record, 64, glyph), record, glyph
    records, images = _load_split(args.support, "support")
    record, image = records[0], images[0]
    if not all(np.isfinite([record.cy, record.cx, record.angle_deg])):
        raise UsageError("support manifest lacks a finite pose")
    half = (ds.GLYPH_SIZE - 1) / 2.0
    # undo the support rotation to recover the upright drawing
    glyph = affine_resample(image, (ds.GLYPH_SIZE, ds.GLYPH_SIZE), -record.angle_deg,
                            (record.cy, record.cx), (half, half))
    return image, record, glyph


def cmd_oneshot(args) -> int:
    model = load_model(args.model)
    image, record, glyph = _support(args)
    probe = oneshot_train(model, image, record)
    out = _out_dir(args)
    _write_text(out, "probe.json", probe.dumps() + "\n")
    records, images = ds.gen_test_set(args.test or 100, args.canvas or 64,
                                      seed=0 if args.seed is None else args.seed,
                                      glyph=glyph, class_id=record.class_id)
    p = model.layers[model.conv_indices()[-1]].layout.period
    hits, lines = 0, []
    for r, img in zip(records, images):
        (i, j), t, score = oneshot_predict(probe, model, img)
        ti, tj = nearest_cell(model, r.cy, r.cx)
        ok = max(abs(i - ti), abs(j - tj)) <= 1 and bin_distance(t, angle_bin(r.angle_deg, p, model.n), p) <= 1
        hits += ok
        lines.append(f"{r.path} i={i} j={j} bin={t} score={score:.6f} hit={int(ok)}")
    lines.append(f"recovered={hits}/{len(records)} rate={hits / len(records):.6f}")
    _write_text(out, "oneshot.txt", "\n".join(lines) + "\n")
    print(lines[-1])
    return EXIT_OK


# parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rinn", description="Rotation-equivariant symbol recognition.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 is the deterministic mode")
    common.add_argument("--canvas", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write datasets as PGM images plus manifest")
    g.add_argument("--train", action="store_true", help="the 15 upright training symbols")
    g.add_argument("--test", type=int, default=None, metavar="N", help="N random test samples")
    g.add_argument("--scenes", type=int, default=None, metavar="K", help="K two-symbol detection scenes")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="run the greedy training pipeline")
    t.add_argument("--stage", choices=("all",) + STAGES, default="all")
    t.add_argument("--resume", metavar="MODEL", default=None)
    t.add_argument("--data", metavar="DIR", default=None, help="training split written by gen --train")
    t.add_argument("--config", metavar="FILE", default=None, help="key=value training config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="class and pose accuracy on a test split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", metavar="DIR", default=None, help="test split; generated from --seed when absent")
    e.add_argument("--test", type=int, default=None, metavar="N")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", parents=[common], help="detections, PR CSV and PR plot")
    d.add_argument("--model", required=True)
    d.add_argument("--data", metavar="DIR", default=None, help="scene split; generated from --seed when absent")
    d.add_argument("--scenes", type=int, default=None, metavar="K")
    d.add_argument("--threshold", type=float, default=0.8)
    d.add_argument("--sweep", default=None, metavar="LO:HI:STEP")
    d.add_argument("--radius", type=int, default=3, help="suppression radius in pose-grid cells")
    d.set_defaults(func=cmd_detect)

    m = sub.add_parser("montage", parents=[common], help="class x orientation tiles of a PoseMap")
    m.add_argument("--model", required=True)
    m.add_argument("--image", required=True)
    m.add_argument("--threshold", type=float, default=0.8)
    m.set_defaults(func=cmd_montage)

    o = sub.add_parser("oneshot", parents=[common], help="fit a linear probe on one support sample")
    o.add_argument("--model", required=True)
    o.add_argument("--support", metavar="DIR", default=None,
                   help="split holding the support image and its pose; a built-in novel symbol when absent")
    o.add_argument("--novel", type=int, default=0, choices=(0, 1), help="built-in novel symbol")
    o.add_argument("--test", type=int, default=None, metavar="N", help="generated poses to score (default 100)")
    o.set_defaults(func=cmd_oneshot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (StageOrderError, DivergenceError) as e:
        print(f"rinn: error: {e}", file=sys.stderr)
        return EXIT_PIPELINE
    except (UsageError, RinnError, OSError) as e:
        print(f"rinn: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
