"""Pydantic request/response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class FuseRequest(BaseModel):
    mask_rle: str = Field(description="row-major alternating zero/one run lengths")
    width: int
    height: int
    box: list[int] = Field(min_length=4, max_length=4)
    priority_mask: int = 1
    priority_box: int = 1


class FuseResponse(BaseModel):
    rule_applied: str
    final_box: list[int]
    final_mask_rle: str
    width: int
    height: int


class HeadShapesRequest(BaseModel):
    input_width: int = 512
    input_height: int = 512
    projection_width: int = 256


class NodeShape(BaseModel):
    id: str
    kind: str
    height: int
    width: int
    channels: int
    scale: int


class HeadShapesResponse(BaseModel):
    nodes: list[NodeShape]
    output: NodeShape
    param_count: int


class MaskEvalRequest(BaseModel):
    pred_path: str
    truth_path: str


class ClassIoU(BaseModel):
    class_id: int
    iou: float


class MaskEvalResponse(BaseModel):
    per_class: list[ClassIoU]
    mean: float
    classes_evaluated: int


class BoxEvalRequest(BaseModel):
    predictions: list[list[int]]
    truths: list[list[int]]


class BoxEvalResponse(BaseModel):
    miou: float
    predictions: int
    truths: int


class SynthesizeRequest(BaseModel):
    dataset_dir: str
    out_dir: str | None = None
    count: int = 1
    grid_size: int = 4
    visibility_threshold: float = 0.25
    base_policy: str = "dataset_image"
    seed: int = 0
    workers: int = 1


class SceneSummaryModel(BaseModel):
    id: str
    seed: int
    grid_size: int
    planned_objects: int
    surviving_objects: int


class SynthesizeResponse(BaseModel):
    scenes: list[SceneSummaryModel]
    out_dir: str | None


class BenchRequest(BaseModel):
    dataset_dir: str
    grid_sizes: list[int] = [3, 4, 5]
    repetitions: int = 30
    seed: int = 0
    modes: list[str] = ["disk", "ram"]


class BenchResponse(BaseModel):
    repetitions: int
    corpus_size: int
    rows: list[dict]


class DetectRequest(BaseModel):
    image_path: str
    labels_path: str
    predictor: str = "connected_components"
    min_area: int = 20
    background_color: list[int] = [0, 0, 0]
    tolerance: int = 0


class DetectionModel(BaseModel):
    class_id: int
    box: list[int]
    mask_rle: str
    width: int
    height: int
    score: float | None = None


class DetectResponse(BaseModel):
    detections: list[DetectionModel]


class PipelineStartRequest(BaseModel):
    config: dict = Field(description="PipelineConfig JSON payload")


class PipelineStateResponse(BaseModel):
    state: str  # idle | running | finished
    report: dict | None = None


class RegisterItemRequest(BaseModel):
    name: str


class RegisterItemResponse(BaseModel):
    class_id: int
    name: str
