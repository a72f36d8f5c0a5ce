"""Command-line surface: thin wrappers over the library modules.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 internal error.
With --json every command prints machine-readable JSON on stdout. Output
files are written via temp-then-rename, so a nonzero exit never leaves a
partial file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
from pathlib import Path

from . import __version__
from .adapters import PREDICTOR_NAMES, RecordingChild, make_predictor
from .batch import synthesize_batch
from .bench import bench_clutter
from .dataset_io import (
    load_image_png,
    load_labels_png,
    read_manifest,
    save_sample,
    write_bytes_atomic,
    write_classes,
)
from .errors import ClutterlabError, DatasetError, ValidationError
from .evaluation import box_set_miou_report, mask_miou
from .fusion import FusionPolicy, assign_label, fuse
from .head_graph import build_head, shape_table
from .instances import detect_instances, detections_to_jsonl
from .pipeline import PipelineConfig, PipelineRun
from .synthesis import ClutterSpec
from .types import AnnotatedSample, Box, ClassRegistry

log = logging.getLogger("clutterlab")

MANIFEST_ENV = "CLUTTERLAB_MANIFEST"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_INTERNAL = 3


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(payload, indent=2))
    elif text is not None:
        print(text)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise ValidationError(f"expected WxH, got {text!r}") from exc


def _predictor_options(args) -> dict:
    options = {}
    if getattr(args, "background", None):
        try:
            options["background_color"] = tuple(int(v) for v in args.background.split(","))
        except ValueError as exc:
            raise ValidationError(f"expected r,g,b, got {args.background!r}") from exc
    if getattr(args, "tolerance", None) is not None:
        options["tolerance"] = args.tolerance
    if getattr(args, "min_area", None) is not None:
        options["min_area"] = args.min_area
    return options


# -- annotate ---------------------------------------------------------------


def cmd_annotate(args) -> int:
    in_dir = Path(args.input)
    out_dir = Path(args.out)
    policy = FusionPolicy.parse(args.policy)
    options = _predictor_options(args)
    if args.predictor == "stored_fixture":
        options.setdefault("fixture_dir", in_dir)
    predictor = make_predictor(args.predictor, **options)

    registry = ClassRegistry()
    frames: list[tuple[str, str, Path]] = []  # (frame id, item name, image path)
    manifest = read_manifest(in_dir) if (in_dir / "manifest.jsonl").exists() else []
    if manifest:
        from .dataset_io import load_registry

        source_registry = load_registry(in_dir)
        for rec in manifest:
            if rec.get("source", "acquired") == "synthesized" or not rec.get("class_ids"):
                continue
            name = source_registry.name_of(int(rec["class_ids"][0]))
            frames.append((rec["id"], name, in_dir / rec["image"]))
    else:
        if not args.label:
            raise ValidationError("a plain image directory needs --label <item-name>")
        images = sorted(p for p in in_dir.glob("*.png") if not p.name.endswith(".labels.png"))
        if not images:
            raise ValidationError(f"no .png images under {in_dir}")
        frames = [(p.stem, args.label, p) for p in images]

    results = []
    for frame_id, name, image_path in frames:
        image = load_image_png(image_path)
        class_id = registry.ensure(name)
        mask = predictor.predict_mask(image)
        boxes = predictor.predict_boxes(image)
        if not boxes:
            raise ValidationError(f"{frame_id}: predictor returned no box")
        box = max(boxes, key=lambda b: b.area)
        fused = fuse(mask, box, policy)
        labels, box_record = assign_label(fused, class_id, registry)
        sample = AnnotatedSample(image=image, labels=labels, boxes=(box_record,), source="acquired")
        sample_id = save_sample(sample, out_dir, sample_id=frame_id)
        results.append({"id": sample_id, "class_id": class_id, "rule": fused.rule_applied})
        if not args.json:
            print(f"{sample_id}  {fused.rule_applied}")
    write_classes(registry, out_dir)
    _emit(args, {"annotated": results, "out": str(out_dir)})
    return EXIT_OK


# -- synthesize ---------------------------------------------------------------


def cmd_synthesize(args) -> int:
    dataset_dir = _dataset_dir(args.manifest)
    spec = ClutterSpec(
        grid_size=args.grid,
        visibility_threshold=args.tau,
        base_policy=args.base_policy,
        seed=args.seed,
    )
    summaries = synthesize_batch(
        dataset_dir,
        spec,
        count=args.count,
        master_seed=args.seed,
        workers=args.workers,
        out_dir=args.out,
    )
    payload = {
        "count": len(summaries),
        "out": str(args.out),
        "scenes": [s.to_dict() for s in summaries],
    }
    text = "\n".join(
        f"{s.sample_id}  grid={s.grid_size}  objects={s.surviving_objects}" for s in summaries
    )
    _emit(args, payload, text)
    return EXIT_OK


def _dataset_dir(manifest: str | None) -> Path:
    manifest = manifest or os.environ.get(MANIFEST_ENV)
    if not manifest:
        raise ValidationError(f"--manifest required (or set {MANIFEST_ENV})")
    path = Path(manifest)
    return path.parent if path.name.endswith(".jsonl") else path


# -- pipeline-run -------------------------------------------------------------


def cmd_pipeline_run(args) -> int:
    config = PipelineConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
    if args.max_scenes is not None:
        payload = json.loads(config.to_json())
        payload["max_scenes"] = args.max_scenes
        config = PipelineConfig.from_json(json.dumps(payload))

    options = dict(config.predictor_options)
    if config.mask_predictor == "stored_fixture" or config.box_predictor == "stored_fixture":
        options.setdefault("fixture_dir", config.acquisition_dir)
    mask_pred = make_predictor(config.mask_predictor, **options)
    box_pred = make_predictor(config.box_predictor, **options)
    child = RecordingChild(service_time=config.child_service_time)

    run = PipelineRun(config, mask_pred, box_pred, child)
    previous = signal.signal(signal.SIGINT, lambda *_: run.stop())
    try:
        run.start()
        run.join()
    finally:
        signal.signal(signal.SIGINT, previous)
    report = run.metrics_snapshot()
    _emit(args, report.to_dict(), report.format_table())
    return EXIT_OK


# -- bench --------------------------------------------------------------------


def cmd_bench(args) -> int:
    dataset_dir = _dataset_dir(args.manifest)
    modes = ("disk", "ram") if args.mode == "both" else (args.mode,)
    grids = tuple(int(g) for g in args.grids.split(","))
    report = bench_clutter(
        dataset_dir,
        grid_sizes=grids,
        repetitions=args.repetitions,
        seed=args.seed,
        modes=modes,
    )
    _emit(args, report.to_dict(), report.format_table())
    return EXIT_OK


# -- detect ---------------------------------------------------------------


def cmd_detect(args) -> int:
    image = load_image_png(args.image)
    labels = load_labels_png(args.labels)
    predictor = make_predictor(args.predictor, **_predictor_options(args))
    detections = detect_instances(image, labels, predictor)
    jsonl = detections_to_jsonl(detections)
    if args.out:
        write_bytes_atomic(args.out, jsonl.encode())
    payload = {"instances": len(detections), "out": args.out}
    if args.json:
        payload["detections"] = [json.loads(line) for line in jsonl.splitlines()]
        _emit(args, payload)
    elif not args.out:
        sys.stdout.write(jsonl)
    else:
        print(f"{len(detections)} instances -> {args.out}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------


def cmd_eval(args) -> int:
    pred, truth = Path(args.pred), Path(args.truth)
    if pred.suffix == ".png" and truth.suffix == ".png":
        report = mask_miou(load_labels_png(pred), load_labels_png(truth))
        payload = json.loads(report.to_json())
        text = "\n".join(
            [f"class {c}: {v:.4f}" for c, v in report.per_class]
            + [f"mean: {report.mean:.4f} over {report.classes_evaluated} classes"]
        )
    elif pred.suffix == ".jsonl" and truth.suffix == ".jsonl":
        payload = box_set_miou_report(_read_boxes(pred), _read_boxes(truth))
        text = f"box mIoU: {payload['miou']:.4f}"
    else:
        raise ValidationError("eval expects two .png label maps or two .jsonl box files")
    _emit(args, payload, text)
    return EXIT_OK


def _read_boxes(path: Path) -> list[Box]:
    boxes = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "box" in rec:
            coords = rec["box"]
        else:
            coords = [rec["x_min"], rec["y_min"], rec["x_max"], rec["y_max"]]
        boxes.append(Box(*(int(v) for v in coords)))
    return boxes


# -- head-shapes ----------------------------------------------------------


def cmd_head_shapes(args) -> int:
    width, height = _parse_size(args.input)
    graph = build_head(args.width)
    if args.json:
        print(graph.to_json(input_size=(height, width)))
    else:
        print(shape_table(graph, (height, width)))
    return EXIT_OK


# -- serve ----------------------------------------------------------------


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="info")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clutterlab",
        description="Annotation fusion, occlusion-aware clutter synthesis, and the online data pipeline.",
    )
    parser.add_argument("--version", action="version", version=f"clutterlab {__version__}")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("annotate", help="label raw images with a predictor pair")
    p.add_argument("--input", required=True)
    p.add_argument("--predictor", default="chroma_oracle", metavar="NAME",
                   help=f"one of: {', '.join(PREDICTOR_NAMES)}")
    p.add_argument("--policy", default="1,1", help="mask,box priorities (e.g. 1,1)")
    p.add_argument("--out", required=True)
    p.add_argument("--label", help="item name for plain image directories")
    p.add_argument("--background", help="background color r,g,b for the chroma oracle")
    p.add_argument("--tolerance", type=int)
    p.add_argument("--min-area", type=int, dest="min_area")
    common(p)
    p.set_defaults(handler=cmd_annotate)

    p = sub.add_parser("synthesize", help="generate occlusion-aware cluttered scenes")
    p.add_argument("--manifest", help=f"dataset dir or manifest (default ${MANIFEST_ENV})")
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--tau", type=float, default=0.25)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--base-policy", default="dataset_image", dest="base_policy")
    common(p)
    p.set_defaults(handler=cmd_synthesize)

    p = sub.add_parser("pipeline-run", help="run the four-stage online pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--max-scenes", type=int, dest="max_scenes")
    common(p)
    p.set_defaults(handler=cmd_pipeline_run)

    p = sub.add_parser("bench", help="time synthesis per grid size, disk vs RAM")
    p.add_argument("--manifest", help=f"dataset dir or manifest (default ${MANIFEST_ENV})")
    p.add_argument("--mode", default="both", choices=("disk", "ram", "both"))
    p.add_argument("--grids", default="3,4,5")
    p.add_argument("--repetitions", type=int, default=30)
    common(p)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("detect", help="instances from a label map + box predictor")
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--predictor", default="connected_components", metavar="NAME",
                   help=f"one of: {', '.join(PREDICTOR_NAMES)}")
    p.add_argument("--min-area", type=int, dest="min_area")
    p.add_argument("--background", help="background color r,g,b")
    p.add_argument("--tolerance", type=int)
    p.add_argument("--out")
    common(p)
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser("eval", help="mask mIoU (.png) or box-set mIoU (.jsonl)")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    common(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("head-shapes", help="shape table of the segmentation head")
    p.add_argument("--input", default="512x512", help="network input WxH")
    p.add_argument("--width", type=int, default=256, help="smoothing width C")
    common(p)
    p.set_defaults(handler=cmd_head_shapes)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    common(p)
    p.set_defaults(handler=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "handler"):
        parser.print_help()
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.handler(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DatasetError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ClutterlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
