"""Command-line entry point: ``oadp <command> ...``.

Commands write their main artifact to ``--out`` (atomically) and a short
JSON summary to stdout. Failures exit with status 1 and a JSON object
``{"error": <class>, "message": <text>}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from oadp.classify import CategoryTable, load_table, save_table
from oadp.crops import CropSettings, compare_crops, prototype_table
from oadp.distill import (
    BG,
    LossParts,
    PyramidWeights,
    StudentStub,
    central_difference,
    l1_gradient,
    loss_block,
    loss_global,
    loss_object,
    rcnn_cls_gradient,
    rcnn_cls_loss,
    relative_error,
    student_forward,
    total_loss,
)
from oadp.encoder import EncoderConfig, load_weights, save_weights
from oadp.errors import OADPError
from oadp.geometry import Box, iou
from oadp.io import (
    Annotation,
    ManifestEntry,
    RunConfig,
    atomic_write_text,
    dumps_jsonl,
    load_config,
    read_jsonl,
    read_manifest,
    read_tensors,
    save_image,
    write_manifest,
    write_tensors,
)
from oadp.metrics import DetectionRecord, match_predictions, metrics_report, pl_stats, pr_curve
from oadp.oake import STRATEGIES, block_embeddings, extract_object_embeddings, global_embedding
from oadp.pseudolabel import PLConfig, PseudoLabel, pls_from_embeddings
from oadp.synthetic import SceneSpec, gen_scene, gen_weights, random_scene_spec

log = logging.getLogger("oadp")


class _JSONArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):  # pragma: no cover - exercised through main()
        raise UsageError(message)


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _bool_list(text: str) -> list[bool]:
    return [_bool(t) for t in text.split(",") if t.strip()]


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    overrides = {}
    for name, key in (("seed", "seed"), ("gamma", "gamma"), ("nms_iou", "nms_iou"),
                      ("score_threshold", "score_threshold"), ("max_per_image", "max_per_image"),
                      ("r", "r"), ("all_novel", "all_novel")):
        value = getattr(args, name, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        data = cfg.to_dict()
        data.update(overrides)
        cfg = RunConfig.from_dict(data)
    return cfg


def _emit(summary: dict) -> None:
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")


def _prop_key(image_id: str, j: int) -> str:
    return f"img{image_id}/prop{j}"


# -- oake ------------------------------------------------------------------------


def cmd_oake(args) -> dict:
    cfg = _config(args)
    entries = read_manifest(args.manifest)
    weights = load_weights(args.weights)
    tensors: dict[str, np.ndarray] = {}
    skipped = 0
    for entry in entries:
        image = entry.load_image()
        embs = extract_object_embeddings(image, [p.box for p in entry.proposals], weights, cfg.r, args.workers)
        for j, e in enumerate(embs):
            if e is None:
                skipped += 1
            else:
                tensors[_prop_key(entry.image_id, j)] = e
        if args.context:
            tensors[f"img{entry.image_id}/global"] = global_embedding(image, weights)
            blocks, boxes = block_embeddings(image, weights, cfg.R)
            for k, e in enumerate(blocks):
                tensors[f"img{entry.image_id}/block{k}"] = e
            tensors[f"img{entry.image_id}/block_boxes"] = np.array([b.as_list() for b in boxes])
    write_tensors(args.out, tensors)
    return {"images": len(entries), "embeddings": sum("/prop" in k for k in tensors), "skipped": skipped}


# -- pl --------------------------------------------------------------------------


def _pl_config(cfg: RunConfig) -> PLConfig:
    return PLConfig(
        gamma=cfg.gamma, nms_iou=cfg.nms_iou, score_threshold=cfg.score_threshold,
        max_per_image=cfg.max_per_image, all_novel=cfg.all_novel,
    )


def run_pl(entries: Sequence[ManifestEntry], weights, table: CategoryTable, cfg: RunConfig, workers: int = 1) -> list[dict]:
    out = []
    pl_cfg = _pl_config(cfg)
    for entry in entries:
        image = entry.load_image()
        embs = extract_object_embeddings(image, [p.box for p in entry.proposals], weights, cfg.r, workers)
        pls = pls_from_embeddings(entry.proposals, embs, table, pl_cfg, cfg.temperature)
        out.append({"image_id": entry.image_id, "pls": [pl.to_json() for pl in pls]})
    return out


def cmd_pl(args) -> dict:
    cfg = _config(args)
    records = run_pl(read_manifest(args.manifest), load_weights(args.weights), load_table(args.table), cfg, args.workers)
    atomic_write_text(args.out, dumps_jsonl(records))
    return {"images": len(records), **{k: v for k, v in pl_stats([r["pls"] for r in records]).items() if k != "images"}}


# -- losses ------------------------------------------------------------------------


def proposal_labels(entry: ManifestEntry, boxes: Sequence[Box], table: CategoryTable, iou_thr: float = 0.5) -> list[int]:
    """Base-category label of the best-overlapping annotation, else background.
    Novel annotations are treated as unlabelled (background)."""
    labels = []
    for box in boxes:
        best, best_iou = BG, iou_thr
        for ann in entry.annotations:
            o = iou(box, ann.box)
            if o >= best_iou and (best == BG or o > best_iou):
                idx = table.index(ann.category)
                best = BG if table.is_novel(ann.category) else idx
                best_iou = o
        labels.append(best)
    return labels


def image_losses(entry, image, teacher, weights, table, stub, cfg: RunConfig, check: bool = True) -> dict:
    keys = [(j, _prop_key(entry.image_id, j)) for j in range(len(entry.proposals))]
    kept = [(j, k) for j, k in keys if k in teacher]
    boxes = [entry.proposals[j].box for j, _ in kept]
    teacher_obj = np.array([teacher[k] for _, k in kept]).reshape(len(kept), stub.d)

    prefix = f"img{entry.image_id}/"
    if prefix + "global" in teacher and prefix + "block_boxes" in teacher:
        teacher_global = teacher[prefix + "global"]
        block_boxes = [Box.from_list(b) for b in teacher[prefix + "block_boxes"]]
        teacher_blocks = np.array([teacher[f"{prefix}block{k}"] for k in range(len(block_boxes))])
    else:
        if weights is None:
            raise OADPError(f"image {entry.image_id}: no global/block teacher embeddings in the container; pass --weights")
        teacher_global = global_embedding(image, weights)
        teacher_blocks, block_boxes = block_embeddings(image, weights, cfg.R)

    student = student_forward(stub, image, boxes, block_boxes)
    labels = proposal_labels(entry, boxes, table)
    red = cfg.l1_reduction
    parts = LossParts(
        rcnn=rcnn_cls_loss(student.E, labels, table, cfg.temperature) if boxes else 0.0,
        obj=loss_object(student.E_O, teacher_obj, red) if boxes else 0.0,
        block=loss_block(student.E_B, teacher_blocks, red),
        glob=loss_global(student.e_G, teacher_global, red),
    )
    weights_ = PyramidWeights(cfg.w_O, cfg.w_B, cfg.w_G)
    report = {
        "image_id": entry.image_id,
        "proposals": len(boxes),
        "blocks": len(block_boxes),
        "losses": {
            "rcnn": parts.rcnn, "object": parts.obj, "block": parts.block, "global": parts.glob,
            "total": total_loss(parts, weights_),
        },
    }
    if check:
        report["gradient_check"] = gradient_check(student, teacher_obj, teacher_blocks, teacher_global, labels, table, cfg)
    return report


def gradient_check(student, teacher_obj, teacher_blocks, teacher_global, labels, table, cfg: RunConfig, h: float = 1e-5) -> dict:
    """Analytic loss gradients against central differences at the student's
    embeddings."""
    red = cfg.l1_reduction
    out = {}
    cases = [
        ("object", student.E_O, teacher_obj),
        ("block", student.E_B, teacher_blocks),
        ("global", np.atleast_2d(student.e_G), np.atleast_2d(teacher_global)),
    ]
    for name, s, t in cases:
        if s.size == 0:
            continue
        grad, tied = l1_gradient(s, t, red)
        numeric = central_difference(lambda x, t=t: float(np.abs(x - t).mean() if red == "mean" else np.abs(x - t).sum()), s, h)
        out[name] = {"max_relative_error": relative_error(grad, numeric), "tied": tied}
    if len(labels):
        grad = rcnn_cls_gradient(student.E, labels, table, cfg.temperature)
        numeric = central_difference(lambda x: rcnn_cls_loss(x, labels, table, cfg.temperature), student.E, h)
        out["rcnn"] = {"max_relative_error": relative_error(grad, numeric), "tied": False}
    return out


def cmd_losses(args) -> dict:
    cfg = _config(args)
    entries = read_manifest(args.manifest)
    teacher = read_tensors(args.teacher_embeddings)
    table = load_table(args.table)
    weights = load_weights(args.weights) if args.weights else None
    stub = StudentStub.from_seed(cfg.seed, d=table.dim)
    reports = [image_losses(e, e.load_image(), teacher, weights, table, stub, cfg, not args.no_gradient_check) for e in entries]
    names = ("rcnn", "object", "block", "global", "total")
    mean = {n: float(np.mean([r["losses"][n] for r in reports])) if reports else 0.0 for n in names}
    worst = {}
    for r in reports:
        for name, g in r.get("gradient_check", {}).items():
            worst[name] = max(worst.get(name, 0.0), g["max_relative_error"])
    result = {
        "seed": cfg.seed,
        "weights": {"w_O": cfg.w_O, "w_B": cfg.w_B, "w_G": cfg.w_G},
        "mean": mean,
        "gradient_check_max_relative_error": worst,
        "images": reports,
    }
    atomic_write_text(args.out, json.dumps(result, indent=2) + "\n")
    return {"images": len(reports), "mean_total": mean["total"], "gradient_check_max_relative_error": worst}


# -- compare-crops -------------------------------------------------------------------


def _crop_csv(rows: Sequence[dict], seed_col: Sequence | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seed", "strategy", "masked", "macro_precision", "weighted_precision", "n"])
    for i, row in enumerate(rows):
        writer.writerow([
            "pooled" if seed_col is None else seed_col[i], row["strategy"], str(row["masked"]).lower(),
            f"{row['macro_precision']:.6f}", f"{row['weighted_precision']:.6f}", row["n"],
        ])
    return buf.getvalue()


def cmd_compare_crops(args) -> dict:
    cfg = _config(args)
    settings = CropSettings(r=args.adaptive_r, fixed_side=args.fixed_side)
    scenes = None
    n_scenes = None
    if Path(args.scenes).is_file():
        scenes = [SceneSpec.from_json(obj) for obj in read_jsonl(args.scenes)]
        n_cat = {s.n_categories for s in scenes}
        if len(n_cat) > 1:
            raise OADPError("scene file mixes category counts")
        if n_cat:
            settings = CropSettings(r=args.adaptive_r, fixed_side=args.fixed_side, n_categories=n_cat.pop())
    else:
        try:
            n_scenes = int(args.scenes)
        except ValueError:
            raise OADPError(f"--scenes must be a scene file or a count, got {args.scenes!r}") from None
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    weights = load_weights(args.weights) if args.weights else None
    result = compare_crops(
        seeds, n_scenes=n_scenes, scenes=scenes, strategies=args.strategies, masked=args.masked,
        settings=settings, weights=weights,
    )
    payload = result.to_json()
    payload["settings"] = {"adaptive_r": settings.r, "fixed_side": settings.fixed_side}
    out = Path(args.out)
    atomic_write_text(out, json.dumps(payload, indent=2) + "\n")
    per_seed_rows = [row for g in result.per_seed for row in g.rows()]
    per_seed_ids = [s for s, g in zip(result.seeds, result.per_seed) for _ in g.rows()]
    atomic_write_text(
        out.with_suffix(".csv"),
        _crop_csv(result.pooled.rows()) + _crop_csv(per_seed_rows, per_seed_ids).split("\n", 1)[1],
    )
    if args.figures:
        from oadp.plotting import plot_crop_grid

        plot_crop_grid(result.pooled.rows(), Path(args.figures) / "crop_grid.png",
                       title=f"{len(seeds)} seeds, {result.pooled.rows()[0]['n']} boxes per cell")
    return {
        "pooled": {f"{r['strategy']}/{'masked' if r['masked'] else 'unmasked'}": round(r["macro_precision"], 4)
                   for r in result.pooled.rows()},
        "masked_adaptive_argmax_rate": payload["masked_adaptive_argmax_rate"],
    }


# -- eval ----------------------------------------------------------------------------


def detection_records(entries: Sequence[ManifestEntry], pl_records: Sequence[dict]) -> list[DetectionRecord]:
    by_id = {}
    for rec in pl_records:
        by_id[str(rec["image_id"])] = [PseudoLabel.from_json(p) for p in rec.get("pls", [])]
    out = []
    for entry in entries:
        pls = by_id.get(entry.image_id, [])
        out.append(DetectionRecord(
            image_id=entry.image_id,
            gts=[(a.box, a.category) for a in entry.annotations],
            preds=[(p.box, p.category, p.score) for p in pls],
        ))
    return out


def cmd_eval(args) -> dict:
    entries = read_manifest(args.manifest)
    pl_records = read_jsonl(args.pl) if Path(args.pl).stat().st_size else []
    records = detection_records(entries, pl_records)
    if args.table:
        table = load_table(args.table)
        categories = [n for n, s in zip(table.names, table.splits) if s == "novel"]
    else:
        categories = sorted({c for r in records for _, c in r.gts})
    report = metrics_report(records, categories)
    atomic_write_text(args.out, json.dumps(report, indent=2) + "\n")
    if args.figures:
        from oadp.plotting import plot_pl_histogram, plot_pr_curves

        curves = {}
        for cat in report["ap50_per_category"]:
            flags, n_gt = match_predictions(records, cat)
            curves[cat] = pr_curve(flags, n_gt)
        plot_pr_curves(curves, Path(args.figures) / "pr_curves.png")
        per_image = [[{"category": c} for _, c, _ in r.preds] for r in records]
        plot_pl_histogram(pl_stats(per_image)["per_category"], Path(args.figures) / "pl_per_category.png")
    return report


# -- synth ---------------------------------------------------------------------------


def cmd_synth(args) -> dict:
    cfg = _config(args)
    out = Path(args.out_dir)
    enc = EncoderConfig()
    weights = gen_weights(enc, cfg.seed)
    table = prototype_table(weights, args.categories)
    save_weights(weights, out / "weights.oadpt")
    save_table(table, out / "table.json")
    entries = []
    specs = []
    for k in range(args.images):
        spec = random_scene_spec(cfg.seed * 100_000 + k, size=args.size, n_objects=args.objects,
                                 n_distractors=args.distractors, n_categories=args.categories)
        scene = gen_scene(spec)
        image_name = f"images/{k:04d}.oadpt"
        save_image(out / image_name, scene.image)
        specs.append(spec.to_json())
        entries.append(ManifestEntry(
            image_id=f"{k:04d}", image=image_name, size=(spec.width, spec.height),
            proposals=scene.proposals,
            annotations=[Annotation(b, table.names[c]) for b, c in scene.ground_truth],
        ))
    write_manifest(out / "manifest.jsonl", entries)
    atomic_write_text(out / "scenes.jsonl", dumps_jsonl(specs))
    return {"images": len(entries), "out_dir": str(out)}


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _JSONArgumentParser(prog="oadp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_JSONArgumentParser)

    def common(p, seed=True):
        p.add_argument("--config", help="RunConfig JSON file")
        if seed:
            p.add_argument("--seed", type=int, help="overrides the config seed")

    p = sub.add_parser("oake", help="object embeddings for every proposal")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--table", help="accepted for symmetry with pl; unused")
    p.add_argument("--out", required=True)
    p.add_argument("--r", type=float, help="adaptive scale ratio")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--context", action="store_true", help="also store global and block embeddings")
    p.set_defaults(func=cmd_oake)

    p = sub.add_parser("pl", help="pseudo labels for novel categories")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--r", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--nms-iou", dest="nms_iou", type=float)
    p.add_argument("--score-threshold", dest="score_threshold", type=float)
    p.add_argument("--max-per-image", dest="max_per_image", type=int)
    p.add_argument("--all-novel", dest="all_novel", action="store_const", const=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_pl)

    p = sub.add_parser("losses", help="student stub forward pass and distillation losses")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--teacher-embeddings", dest="teacher_embeddings", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--weights", help="encoder weights, needed when the container lacks global/block entries")
    p.add_argument("--out", required=True)
    p.add_argument("--no-gradient-check", dest="no_gradient_check", action="store_true")
    p.set_defaults(func=cmd_losses)

    p = sub.add_parser("compare-crops", help="crop strategy x mask grid on synthetic scenes")
    common(p)
    p.add_argument("--scenes", required=True, help="scene-spec JSON-lines file, or a number of random scenes per seed")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds, starting at --seed")
    p.add_argument("--strategies", type=_str_list, default=list(STRATEGIES))
    p.add_argument("--masked", type=_bool_list, default=[True, False])
    p.add_argument("--adaptive-r", dest="adaptive_r", type=float, default=4.0)
    p.add_argument("--fixed-side", dest="fixed_side", type=float, default=48.0)
    p.add_argument("--weights")
    p.add_argument("--out", required=True)
    p.add_argument("--figures", help="directory for PNG figures")
    p.set_defaults(func=cmd_compare_crops)

    p = sub.add_parser("eval", help="metrics report for a pseudo-label file")
    common(p)
    p.add_argument("--pl", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--table", help="restrict to the table's novel categories")
    p.add_argument("--out", required=True)
    p.add_argument("--figures", help="directory for PNG figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic dataset, weights and category table")
    common(p)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--images", type=int, default=4)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--distractors", type=int, default=3)
    p.add_argument("--categories", type=int, default=4)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        _emit(args.func(args))
        return 0
    except UsageError as exc:
        sys.stderr.write(json.dumps({"error": "UsageError", "message": str(exc)}) + "\n")
        return 2
    except (OADPError, OSError, ValueError, KeyError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
