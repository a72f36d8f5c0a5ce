"""FastAPI service wrapping the core package.

Batch operations (fuse, synthesize, bench, detect, eval, head shapes) are
plain request/response wrappers. The pipeline runs as a managed background
job: start it, poll its metrics, register new items mid-run, stop it for the
final report. One pipeline run at a time.
"""

from __future__ import annotations

import json
import threading

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..adapters import RecordingChild, make_predictor
from ..batch import synthesize_batch
from ..bench import bench_clutter
from ..dataset_io import load_image_png, load_labels_png
from ..errors import DatasetError, MissingSampleError, ValidationError
from ..evaluation import box_set_miou_report, mask_miou
from ..fusion import FusionPolicy, fuse
from ..head_graph import build_head, infer_shapes, param_count
from ..instances import decode_rle, detect_instances, detection_to_dict, encode_rle
from ..pipeline import PipelineConfig, PipelineRun
from ..synthesis import ClutterSpec
from ..types import Box
from . import schemas


class PipelineManager:
    """Owns at most one live pipeline run."""

    def __init__(self):
        self._lock = threading.Lock()
        self._run: PipelineRun | None = None
        self._last_report: dict | None = None

    def start(self, config: PipelineConfig) -> None:
        with self._lock:
            if self._run is not None and any(t.is_alive() for t in self._run._threads):
                raise ValidationError("a pipeline run is already active")
            options = dict(config.predictor_options)
            if "stored_fixture" in (config.mask_predictor, config.box_predictor):
                options.setdefault("fixture_dir", config.acquisition_dir)
            run = PipelineRun(
                config,
                make_predictor(config.mask_predictor, **options),
                make_predictor(config.box_predictor, **options),
                RecordingChild(service_time=config.child_service_time),
            )
            run.start()
            self._run = run

    def state(self) -> schemas.PipelineStateResponse:
        with self._lock:
            if self._run is None:
                return schemas.PipelineStateResponse(state="idle", report=self._last_report)
            running = any(t.is_alive() for t in self._run._threads)
            report = self._run.metrics_snapshot().to_dict()
            return schemas.PipelineStateResponse(
                state="running" if running else "finished", report=report
            )

    def register_item(self, name: str) -> int:
        with self._lock:
            if self._run is None:
                raise ValidationError("no active pipeline run")
            return self._run.register_item(name)

    def stop(self) -> dict:
        with self._lock:
            run = self._run
            if run is None:
                raise ValidationError("no active pipeline run")
        run.stop()
        run.join(timeout=120.0)
        report = run.metrics_snapshot().to_dict()
        with self._lock:
            self._last_report = report
            self._run = None
        return report


def create_app() -> FastAPI:
    app = FastAPI(title="clutterlab", version=__version__)
    manager = PipelineManager()
    app.state.pipeline = manager

    @app.exception_handler(ValidationError)
    async def _validation(request: Request, exc: ValidationError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(MissingSampleError)
    async def _missing(request: Request, exc: MissingSampleError):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.exception_handler(DatasetError)
    async def _dataset(request: Request, exc: DatasetError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/fuse", response_model=schemas.FuseResponse)
    def fuse_endpoint(req: schemas.FuseRequest):
        mask = decode_rle(req.mask_rle, req.width, req.height)
        fused = fuse(mask, Box(*req.box), FusionPolicy(req.priority_mask, req.priority_box))
        return schemas.FuseResponse(
            rule_applied=fused.rule_applied,
            final_box=list(fused.final_box.as_tuple()),
            final_mask_rle=encode_rle(fused.final_mask),
            width=req.width,
            height=req.height,
        )

    @app.post("/head/shapes", response_model=schemas.HeadShapesResponse)
    def head_shapes(req: schemas.HeadShapesRequest):
        graph = build_head(req.projection_width)
        shapes = infer_shapes(graph, (req.input_height, req.input_width))
        nodes = [
            schemas.NodeShape(
                id=n.id, kind=n.kind, height=shapes[n.id][0], width=shapes[n.id][1],
                channels=shapes[n.id][2], scale=n.scale,
            )
            for n in graph.topological()
        ]
        out = graph.output
        h, w, c = shapes[out.id]
        return schemas.HeadShapesResponse(
            nodes=nodes,
            output=schemas.NodeShape(
                id=out.id, kind=out.kind, height=h, width=w, channels=c, scale=out.scale
            ),
            param_count=param_count(graph),
        )

    @app.post("/eval/masks", response_model=schemas.MaskEvalResponse)
    def eval_masks(req: schemas.MaskEvalRequest):
        report = mask_miou(load_labels_png(req.pred_path), load_labels_png(req.truth_path))
        return schemas.MaskEvalResponse(
            per_class=[schemas.ClassIoU(class_id=c, iou=v) for c, v in report.per_class],
            mean=report.mean,
            classes_evaluated=report.classes_evaluated,
        )

    @app.post("/eval/boxes", response_model=schemas.BoxEvalResponse)
    def eval_boxes(req: schemas.BoxEvalRequest):
        preds = [Box(*(int(v) for v in b)) for b in req.predictions]
        truths = [Box(*(int(v) for v in b)) for b in req.truths]
        return schemas.BoxEvalResponse(**box_set_miou_report(preds, truths))

    @app.post("/synthesize", response_model=schemas.SynthesizeResponse)
    def synthesize_endpoint(req: schemas.SynthesizeRequest):
        spec = ClutterSpec(
            grid_size=req.grid_size,
            visibility_threshold=req.visibility_threshold,
            base_policy=req.base_policy,
            seed=req.seed,
        )
        summaries = synthesize_batch(
            req.dataset_dir, spec, req.count, req.seed,
            workers=req.workers, out_dir=req.out_dir,
        )
        return schemas.SynthesizeResponse(
            scenes=[schemas.SceneSummaryModel(**s.to_dict()) for s in summaries],
            out_dir=req.out_dir,
        )

    @app.post("/bench", response_model=schemas.BenchResponse)
    def bench_endpoint(req: schemas.BenchRequest):
        report = bench_clutter(
            req.dataset_dir,
            grid_sizes=tuple(req.grid_sizes),
            repetitions=req.repetitions,
            seed=req.seed,
            modes=tuple(req.modes),
        )
        return schemas.BenchResponse(**report.to_dict())

    @app.post("/detect", response_model=schemas.DetectResponse)
    def detect_endpoint(req: schemas.DetectRequest):
        predictor = make_predictor(
            req.predictor,
            min_area=req.min_area,
            background_color=tuple(req.background_color),
            tolerance=req.tolerance,
        )
        detections = detect_instances(
            load_image_png(req.image_path), load_labels_png(req.labels_path), predictor
        )
        return schemas.DetectResponse(
            detections=[schemas.DetectionModel(**detection_to_dict(d)) for d in detections]
        )

    @app.post("/pipeline/start", response_model=schemas.PipelineStateResponse)
    def pipeline_start(req: schemas.PipelineStartRequest):
        try:
            config = PipelineConfig.from_json(json.dumps(req.config))
        except (KeyError, TypeError) as exc:
            raise HTTPException(status_code=400, detail=f"bad config: {exc}") from exc
        try:
            manager.start(config)
        except ValidationError as exc:
            if "already active" in str(exc):
                raise HTTPException(status_code=409, detail=str(exc)) from exc
            raise
        return manager.state()

    @app.get("/pipeline/status", response_model=schemas.PipelineStateResponse)
    def pipeline_status():
        return manager.state()

    @app.post("/pipeline/register-item", response_model=schemas.RegisterItemResponse)
    def pipeline_register(req: schemas.RegisterItemRequest):
        class_id = manager.register_item(req.name)
        return schemas.RegisterItemResponse(class_id=class_id, name=req.name)

    @app.post("/pipeline/stop", response_model=schemas.PipelineStateResponse)
    def pipeline_stop():
        report = manager.stop()
        return schemas.PipelineStateResponse(state="idle", report=report)

    return app
