"""Command-line entry point: ``ftmtl <command> ...``.

Commands: gen-data, train, infer, eval, curves. Exit codes are 0 on success,
2 for usage or configuration errors, 3 for I/O failures, 4 when training hits
a non-finite loss, 5 for a checkpoint format version mismatch and 6 when
predictions and ground truth do not line up.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import BoxCS
from .checkpoint import CheckpointError, CheckpointVersionError, load_checkpoint, save_checkpoint
from .config import CONFIG_NAME, ConfigError, RunConfig, load_config, parse_pairs
from .curves import CurveFormatError, read_curve_csv, write_curve_csv, write_svg
from .data import (
    DatasetError,
    Sample,
    build_training_set,
    crop_breast_region,
    generate_synthetic,
    kfold,
    load_dataset,
    save_dataset,
)
from .evaluation import aggregate_folds, summarize
from .infer import Detection, infer, malignant_veto
from .train import LOSS_COLUMNS, TrainingAborted, five_step_train

log = logging.getLogger("ftmtl")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NAN, EXIT_VERSION, EXIT_MISMATCH = 0, 2, 3, 4, 5, 6
PREDICTIONS = "predictions.jsonl"
CHECKPOINT = "model.ckpt"
CLASS_NAMES = ("background", "benign", "malignant")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _overrides(pairs: list[str] | None) -> dict:
    text = "\n".join(pairs or [])
    return parse_pairs(text)


# -- gen-data ----------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise CliError(EXIT_USAGE, "--n must be >= 1")
    if not 0.0 <= args.benign_fraction <= 1.0:
        raise CliError(EXIT_USAGE, "--benign-fraction must lie in [0, 1]")
    if args.size % 16 or args.size < 48:
        raise CliError(EXIT_USAGE, "--size must be a multiple of 16 and at least 48")
    cfg = load_config(overrides={"seed": args.seed} if args.seed is not None else None)
    samples = generate_synthetic(args.n, cfg.seed, args.benign_fraction, args.size)
    out = Path(args.out)
    save_dataset(samples, out)
    text = cfg.to_text() + f"# gen-data: n = {args.n}, benign_fraction = {args.benign_fraction}, size = {args.size}\n"
    (out / CONFIG_NAME).write_text(text, encoding="utf-8")
    n_b = sum(s.label == "benign" for s in samples)
    print(f"wrote {len(samples)} samples ({n_b} benign, {len(samples) - n_b} malignant) to {out}")
    return EXIT_OK


# -- train -------------------------------------------------------------------------------


def _training_samples(samples: list[Sample], cfg: RunConfig, fold: int | None):
    if cfg.crop_breast:
        samples = [crop_breast_region(s) for s in samples]
    split = None
    if fold is not None:
        if not 0 <= fold < cfg.folds:
            raise CliError(EXIT_USAGE, f"--fold must lie in [0, {cfg.folds})")
        train_ids, test_ids = kfold(samples, cfg.folds, cfg.seed).fold(fold)
        split = {"fold": fold, "train_ids": train_ids, "test_ids": test_ids}
        keep = set(train_ids)
        samples = [s for s in samples if s.id in keep]
    if cfg.benign_reps or cfg.malignant_reps:
        samples = build_training_set(samples, cfg.benign_reps, cfg.malignant_reps, cfg.seed)
    return samples, split


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.preset, _overrides(args.set))
    samples = load_dataset(args.data)
    train_samples, split = _training_samples(samples, cfg, args.fold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out)
    if split is not None:
        (out / "split.json").write_text(json.dumps(split, indent=1) + "\n", encoding="utf-8")
    log.info("training on %d samples", len(train_samples))
    try:
        result = five_step_train(train_samples, cfg.model_config(), cfg.train_config())
    except TrainingAborted as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NAN
    with open(out / "losses.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in result.history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    save_checkpoint(result.model, out / CHECKPOINT, cfg, result.phase, result.rng)
    print(f"checkpoint written to {out / CHECKPOINT}")
    return EXIT_OK


# -- infer -------------------------------------------------------------------------------


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1)
    scale = 65535.0 if arr.dtype == np.uint16 or arr.max() > 255 else 255.0
    return (arr.astype(np.float64) / scale).astype(np.float32)


def detection_record(det: Detection, mask_rel: str | None) -> dict:
    return {
        "box": [float(v) for v in det.box.corners()],
        "objectness": float(det.objectness),
        "p": [float(v) for v in det.probs],
        "label": CLASS_NAMES[det.label],
        "mask": mask_rel,
    }


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if (args.image is None) == (args.data is None):
        raise CliError(EXIT_USAGE, "give exactly one of --image or --data")
    if args.image is not None:
        items = [(Path(args.image).stem, _read_image(Path(args.image)))]
    else:
        samples = load_dataset(args.data)
        if args.ids:
            wanted = _read_ids(args.ids)
            samples = [s for s in samples if s.id in wanted]
        items = [(s.id, s.image) for s in samples]
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    ckpt.config.save(out)
    lines = []
    for sid, image in items:
        dets = infer(image, ckpt.model)
        veto = malignant_veto(dets)
        recs = []
        for k, d in enumerate(dets):
            rel = None
            if d.mask is not None:
                rel = f"masks/{sid}_{k}.png"
                Image.fromarray(((d.mask >= 0.5) * 255).astype(np.uint8)).save(out / rel)
            recs.append(detection_record(d, rel))
        lines.append(json.dumps({"id": sid, "score": veto.score, "no_findings": veto.no_findings, "detections": recs}, sort_keys=True))
    (out / PREDICTIONS).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    print(f"{len(items)} images, predictions in {out / PREDICTIONS}")
    return EXIT_OK


def _read_ids(path) -> set[str]:
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        data = json.loads(text)
        return set(data["test_ids"] if isinstance(data, dict) else data)
    return {line.strip() for line in text.splitlines() if line.strip()}


def load_predictions(pred_dir) -> dict[str, list[Detection]]:
    """Read ``predictions.jsonl`` (and mask PNGs) back into detections per image id."""
    root = Path(pred_dir)
    out = {}
    for line in (root / PREDICTIONS).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        dets = []
        for d in rec["detections"]:
            mask = None
            if d.get("mask"):
                with Image.open(root / d["mask"]) as im:
                    mask = (np.array(im) > 127).astype(np.float64)
            dets.append(Detection(BoxCS.from_corners(*d["box"]), d["objectness"], np.array(d["p"], dtype=np.float64), mask))
        out[rec["id"]] = dets
    return out


# -- eval --------------------------------------------------------------------------------


def cmd_eval(args) -> int:
    cfg = load_config(args.config, overrides=_overrides(args.set))
    if args.iou_tp is not None:
        cfg = cfg.replace(iou_tp=args.iou_tp)
    if args.iou_detected is not None:
        cfg = cfg.replace(iou_detected=args.iou_detected)
    preds = load_predictions(args.pred)
    samples = load_dataset(args.data)
    if args.ids:
        wanted = _read_ids(args.ids)
        samples = [s for s in samples if s.id in wanted]
    gt_ids = {s.id for s in samples}
    orphans = sorted(set(preds) ^ gt_ids)
    if orphans:
        missing_pred = sorted(gt_ids - set(preds))
        extra_pred = sorted(set(preds) - gt_ids)
        msg = "prediction/ground-truth id mismatch"
        if missing_pred:
            msg += f"; no predictions for: {', '.join(missing_pred)}"
        if extra_pred:
            msg += f"; no ground truth for: {', '.join(extra_pred)}"
        raise CliError(EXIT_MISMATCH, msg)
    fpis = tuple(cfg.fpi_points)
    summary = summarize(samples, [preds[s.id] for s in samples], fpis, cfg.iou_tp, cfg.iou_detected)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out)
    write_curve_csv(summary.froc, out / "froc.csv")
    write_svg([summary.froc], out / "froc.svg", ["froc"])
    write_curve_csv(summary.ap_iou, out / "ap_iou.csv")
    write_svg([summary.ap_iou], out / "ap_iou.svg", ["detected fraction"])
    if summary.roc is not None:
        write_curve_csv(summary.roc, out / "roc.csv")
        write_svg([summary.roc], out / "roc.svg", [f"AUC {summary.auc:.3f}"])
    with open(out / "dice.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "mass", "label", "veto_score", "dice"])
        for r in summary.masses:
            w.writerow([r.sample_id, r.mass_index, r.label, repr(r.veto), repr(r.dice)])
    lines = [f"n_images = {len(samples)}", f"n_masses = {summary.n_masses}", f"n_detected = {summary.n_detected}"]
    lines.append(f"auc = {'nan' if summary.auc is None else repr(summary.auc)}")
    for f in fpis:
        lines.append(f"tpr_at_fpi_{f:g} = {summary.tpr_at[f]!r}")
    if summary.masses:
        mean, std = aggregate_folds(summary.dice)
        lines += [f"dice_mean = {mean!r}", f"dice_std = {std!r}"]
    else:
        lines += ["dice_mean = nan", "dice_std = nan"]
    (out / "metrics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


# -- curves ------------------------------------------------------------------------------


def cmd_curves(args) -> int:
    try:
        curves = [read_curve_csv(p) for p in args.inputs]
    except CurveFormatError as e:
        raise CliError(EXIT_USAGE, str(e)) from None
    names = args.names.split(",") if args.names else [Path(p).stem for p in args.inputs]
    if len(names) != len(curves):
        raise CliError(EXIT_USAGE, "--names needs one name per input")
    write_svg(curves, args.out, names, args.title or "")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ftmtl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=250)
    g.add_argument("--benign-fraction", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--size", type=int, default=64)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the staged training schedule")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--fold", type=int, default=None)
    t.add_argument("--preset", choices=("desk", "paper-shape"), default="desk")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="detect, segment and classify")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", default=None)
    i.add_argument("--data", default=None)
    i.add_argument("--ids", default=None, help="restrict to ids listed in a file or a split.json")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--ids", default=None)
    e.add_argument("--config", default=None)
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--iou-tp", type=float, default=None)
    e.add_argument("--iou-detected", type=float, default=None)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("curves", help="plot curve CSVs to SVG")
    c.add_argument("--in", dest="inputs", nargs="+", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--names", default=None)
    c.add_argument("--title", default=None)
    c.set_defaults(func=cmd_curves)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointVersionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VERSION
    except (CheckpointError, DatasetError, OSError, json.JSONDecodeError, KeyError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
