"""Shape-level model of the segmentation head: build the block graph, infer
per-node spatial sizes and channel counts, and count learnable parameters.

Blocks:
  FSB  1x1 conv + affine normalization + nonlinearity; the only block with
       learnable parameters; sets its own output width.
  FIB  parameter-free 2x bilinear upsample (halves the scale denominator).
  MERGE_ADD  elementwise sum; all inputs must agree in channels and scale.
  CEB  channel concatenation; all inputs must agree in scale.

The default topology merges the four deepest backbone stages through a
top-down cascade (project, upsample, add, smooth) and concatenates the
cascade output with four per-stage context branches upsampled to the
quarter-resolution scale, finishing with one more smoothing block. The
backbone's own stages are modeled as fixed-shape inputs; no tensors are ever
executed here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ValidationError

BACKBONE_STAGES: tuple[tuple[str, int, int], ...] = (
    # (stage name, output channels, scale denominator)
    ("conv2_3", 256, 4),
    ("conv3_4", 512, 8),
    ("conv4_6", 1024, 16),
    ("conv5_3", 2048, 32),
)

KINDS = ("backbone_stage", "FSB", "FIB", "MERGE_ADD", "CEB")


@dataclass(frozen=True)
class HeadNode:
    id: str
    kind: str
    inputs: tuple[str, ...]
    out_channels: int
    scale: int  # denominator relative to the network input (4, 8, 16, 32, ...)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown node kind {self.kind!r}")


@dataclass(frozen=True)
class HeadGraph:
    nodes: tuple[HeadNode, ...]
    projection_width: int

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(ids) != len(set(ids)):
            raise ValidationError("duplicate node ids")
        by_id = {n.id: n for n in self.nodes}
        for node in self.nodes:
            for src in node.inputs:
                if src not in by_id:
                    raise ValidationError(f"node {node.id} references unknown input {src}")
        self._check_acyclic()
        if len(self.sinks()) != 1:
            raise ValidationError(f"expected a single sink, found {self.sinks()}")

    def _check_acyclic(self):
        order: dict[str, int] = {}
        visiting: set[str] = set()
        by_id = {n.id: n for n in self.nodes}

        def visit(nid: str):
            if nid in order:
                return
            if nid in visiting:
                raise ValidationError(f"cycle through node {nid}")
            visiting.add(nid)
            for src in by_id[nid].inputs:
                visit(src)
            visiting.discard(nid)
            order[nid] = len(order)

        for node in self.nodes:
            visit(node.id)

    def node(self, node_id: str) -> HeadNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise ValidationError(f"no node {node_id!r}")

    def sinks(self) -> list[str]:
        consumed = {src for n in self.nodes for src in n.inputs}
        return [n.id for n in self.nodes if n.id not in consumed]

    @property
    def output(self) -> HeadNode:
        return self.node(self.sinks()[0])

    def topological(self) -> list[HeadNode]:
        by_id = {n.id: n for n in self.nodes}
        seen: dict[str, None] = {}

        def visit(nid: str):
            if nid in seen:
                return
            for src in by_id[nid].inputs:
                visit(src)
            seen[nid] = None

        for n in self.nodes:
            visit(n.id)
        return [by_id[nid] for nid in seen]

    def to_json(self, input_size: tuple[int, int] | None = None) -> str:
        payload: dict = {
            "projection_width": self.projection_width,
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind,
                    "inputs": list(n.inputs),
                    "out_channels": n.out_channels,
                    "scale": n.scale,
                }
                for n in self.topological()
            ],
            "edges": [[src, n.id] for n in self.nodes for src in n.inputs],
            "param_count": param_count(self),
        }
        if input_size is not None:
            shapes = infer_shapes(self, input_size)
            payload["shapes"] = {
                nid: {"height": h, "width": w, "channels": c}
                for nid, (h, w, c) in shapes.items()
            }
        return json.dumps(payload, indent=2)


def build_head(projection_width: int = 256) -> HeadGraph:
    """Construct the default head topology for the given smoothing width."""
    if projection_width < 1:
        raise ValidationError("projection width must be >= 1")
    c = projection_width
    nodes: list[HeadNode] = []

    for name, channels, scale in BACKBONE_STAGES:
        nodes.append(HeadNode(name, "backbone_stage", (), channels, scale))

    # Lateral projections to the common width.
    for name, _, scale in BACKBONE_STAGES:
        nodes.append(HeadNode(f"fsb_lat_{name}", "FSB", (name,), c, scale))

    # Top-down cascade: deepest stage upsampled and merged into each
    # shallower stage's projection, smoothing after every merge.
    cascade = "fsb_lat_conv5_3"
    scale = 32
    for name in ("conv4_6", "conv3_4", "conv2_3"):
        scale //= 2
        fib_id = f"fib_td_{name}"
        nodes.append(HeadNode(fib_id, "FIB", (cascade,), c, scale))
        add_id = f"add_td_{name}"
        nodes.append(HeadNode(add_id, "MERGE_ADD", (fib_id, f"fsb_lat_{name}"), c, scale))
        fsb_id = f"fsb_td_{name}"
        nodes.append(HeadNode(fsb_id, "FSB", (add_id,), c, scale))
        cascade = fsb_id

    # Context branches: each stage projected then upsampled to the /4 scale.
    branch_outputs = []
    for name, _, scale in BACKBONE_STAGES:
        src = f"fsb_lat_{name}"
        hops = 0
        while scale > 4:
            hops += 1
            scale //= 2
            fib_id = f"fib_ctx_{name}_{hops}"
            nodes.append(HeadNode(fib_id, "FIB", (src,), c, scale))
            src = fib_id
        branch_outputs.append(src)

    ceb_inputs = (cascade, *reversed(branch_outputs))  # cascade + deep-to-shallow branches
    nodes.append(HeadNode("ceb", "CEB", ceb_inputs, c * len(ceb_inputs), 4))
    nodes.append(HeadNode("fsb_out", "FSB", ("ceb",), c, 4))
    return HeadGraph(tuple(nodes), projection_width=c)


def infer_shapes(graph: HeadGraph, input_size: tuple[int, int]) -> dict[str, tuple[int, int, int]]:
    """Per-node (height, width, channels) for the given network input size.

    Backbone stages floor-divide the input by their scale; FIB doubles the
    spatial size. Channel or scale disagreements raise naming the node.
    """
    height, width = input_size
    if height < 32 or width < 32:
        raise ValidationError(f"input {width}x{height} too small for a /32 backbone")
    shapes: dict[str, tuple[int, int, int]] = {}
    for node in graph.topological():
        if node.kind == "backbone_stage":
            shapes[node.id] = (height // node.scale, width // node.scale, node.out_channels)
        elif node.kind == "FSB":
            h, w, _ = shapes[node.inputs[0]]
            shapes[node.id] = (h, w, node.out_channels)
        elif node.kind == "FIB":
            h, w, ch = shapes[node.inputs[0]]
            if ch != node.out_channels:
                raise ValidationError(f"FIB {node.id} must preserve channels")
            shapes[node.id] = (h * 2, w * 2, ch)
        elif node.kind == "MERGE_ADD":
            first = shapes[node.inputs[0]]
            for src in node.inputs[1:]:
                if shapes[src] != first:
                    raise ValidationError(
                        f"MERGE_ADD {node.id}: input {src} is {shapes[src]}, "
                        f"expected {first}"
                    )
            shapes[node.id] = first
        elif node.kind == "CEB":
            h, w, _ = shapes[node.inputs[0]]
            total = 0
            for src in node.inputs:
                sh, sw, sc = shapes[src]
                if (sh, sw) != (h, w):
                    raise ValidationError(
                        f"CEB {node.id}: input {src} is {sw}x{sh}, expected {w}x{h}"
                    )
                total += sc
            if total != node.out_channels:
                raise ValidationError(
                    f"CEB {node.id}: channels sum to {total}, node declares {node.out_channels}"
                )
            shapes[node.id] = (h, w, total)
    return shapes


def param_count(graph: HeadGraph) -> int:
    """Learnable parameters: each FSB holds a 1x1 conv (in*out weights + out
    biases) plus a 2*out affine normalization; every other block is free."""
    by_id = {n.id: n for n in graph.nodes}
    total = 0
    for node in graph.nodes:
        if node.kind != "FSB":
            continue
        in_channels = by_id[node.inputs[0]].out_channels
        total += in_channels * node.out_channels + node.out_channels + 2 * node.out_channels
    return total


def shape_table(graph: HeadGraph, input_size: tuple[int, int]) -> str:
    """Aligned text table of node shapes for the CLI."""
    shapes = infer_shapes(graph, input_size)
    rows = [("node", "kind", "output (HxWxC)", "scale")]
    for node in graph.topological():
        h, w, ch = shapes[node.id]
        rows.append((node.id, node.kind, f"{h}x{w}x{ch}", f"/{node.scale}"))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows]
    lines.append(f"parameters: {param_count(graph)}")
    return "\n".join(lines)
