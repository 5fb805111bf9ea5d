"""Toy base networks: a grid single-shot detector and an FCN-style segmenter.

A network is an ordered list of layer specs interpreted by `forward`;
branches (detector heads, segmenter skip) reference earlier layer
positions. Conv layers carry unique indices so priming masks can address
them. Parameters are frozen by default and stored in the named-tensor
archive format alongside a textual manifest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .metrics import iou
from .tensor import (
    ShapeError,
    Tensor,
    bilinear_upsample,
    conv2d,
    load_archive,
    maxpool2d,
    relu,
    save_archive,
)

__all__ = [
    "LayerSpec",
    "BaseNetwork",
    "Detection",
    "DetectorOutput",
    "SegOutput",
    "build_toy_detector",
    "build_toy_segmenter",
    "decode_detections",
    "decode_labelmap",
    "save_network",
    "load_network",
]

DETECTOR_BLOCKS = ("backbone", "extra", "loc", "conf")
SEGMENTER_BLOCKS = ("encoder", "decoder", "head")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | relu | pool | upsample
    block: str
    conv_index: int | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int | None = None
    pad: int | None = None
    factor: int | None = None
    input_from: int | None = None  # consume an earlier layer position instead of the stream
    add_to: int | None = None  # add this layer's output to an earlier position's output

    @property
    def primeable(self) -> bool:
        return self.kind == "conv"

    def manifest_line(self, position: int) -> str:
        parts = [str(position), self.kind, self.block]
        for key, val in (
            ("conv_index", self.conv_index),
            ("in", self.in_channels),
            ("out", self.out_channels),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("pad", self.pad),
            ("factor", self.factor),
            ("input_from", self.input_from),
            ("add_to", self.add_to),
        ):
            if val is not None:
                parts.append(f"{key}={val}")
        return " ".join(parts)


@dataclass
class Detection:
    """A scored, class-labeled box in pixel coordinates (x0, y0, x1, y1)."""

    box: tuple[float, float, float, float]
    class_id: int
    score: float
    cell: int = 0

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")
        if not math.isfinite(self.score):
            raise ValueError("non-finite detection score")


@dataclass
class DetectorOutput:
    loc: Tensor
    conf: Tensor
    image_size: int
    grid: int
    anchors: int
    n_classes: int

    @property
    def batched(self) -> bool:
        return self.loc.data.ndim == 4

    def per_image(self) -> list["DetectorOutput"]:
        if not self.batched:
            return [self]
        return [
            DetectorOutput(
                Tensor(self.loc.data[i]),
                Tensor(self.conf.data[i]),
                self.image_size,
                self.grid,
                self.anchors,
                self.n_classes,
            )
            for i in range(self.loc.data.shape[0])
        ]


@dataclass
class SegOutput:
    scores: Tensor  # [C+1, H, W] or [N, C+1, H, W]
    n_classes: int

    @property
    def batched(self) -> bool:
        return self.scores.data.ndim == 4

    def per_image(self) -> list["SegOutput"]:
        if not self.batched:
            return [self]
        return [SegOutput(Tensor(self.scores.data[i]), self.n_classes) for i in range(self.scores.data.shape[0])]


@dataclass
class BaseNetwork:
    task: str  # detection | segmentation
    n_classes: int
    image_size: int
    layers: list[LayerSpec]
    outputs: dict[str, int]
    params: dict[str, Tensor]
    block_order: tuple[str, ...]
    seed: int
    anchors_per_cell: int = 1
    out_stride: int = 8

    @property
    def grid(self) -> int:
        return self.image_size // self.out_stride

    def primeable_layers(self) -> list[int]:
        return [s.conv_index for s in self.layers if s.primeable]

    def conv_channels(self, conv_index: int) -> int:
        for s in self.layers:
            if s.conv_index == conv_index:
                return s.out_channels
        raise KeyError(f"no conv layer with index {conv_index}")

    def block_of(self, conv_index: int) -> str:
        for s in self.layers:
            if s.conv_index == conv_index:
                return s.block
        raise KeyError(f"no conv layer with index {conv_index}")

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def forward(self, x: Tensor, modulator=None, placement: str = "pre-relu"):
        """Run the network; `modulator(conv_index, tensor) -> tensor` hooks in
        right after each conv (or after its ReLU for post-relu placement)."""
        outs: list[Tensor] = []
        h = x
        pending: int | None = None
        for pos, spec in enumerate(self.layers):
            src = outs[spec.input_from] if spec.input_from is not None else h
            if spec.kind == "conv":
                y = conv2d(
                    src,
                    self.params[f"conv{spec.conv_index}.w"],
                    self.params[f"conv{spec.conv_index}.b"],
                    stride=spec.stride,
                    pad=spec.pad,
                )
                if modulator is not None:
                    nxt = self.layers[pos + 1] if pos + 1 < len(self.layers) else None
                    follows_relu = nxt is not None and nxt.kind == "relu" and nxt.input_from is None
                    if placement == "post-relu" and follows_relu:
                        pending = spec.conv_index
                    else:
                        y = modulator(spec.conv_index, y)
            elif spec.kind == "relu":
                y = relu(src)
                if pending is not None:
                    y = modulator(pending, y)
                    pending = None
            elif spec.kind == "pool":
                y = maxpool2d(src, spec.kernel, spec.stride)
            elif spec.kind == "upsample":
                y = bilinear_upsample(src, spec.factor)
            else:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
            if spec.add_to is not None:
                y = y + outs[spec.add_to]
            outs.append(y)
            h = y

        if self.task == "detection":
            return DetectorOutput(
                loc=outs[self.outputs["loc"]],
                conf=outs[self.outputs["conf"]],
                image_size=self.image_size,
                grid=self.grid,
                anchors=self.anchors_per_cell,
                n_classes=self.n_classes,
            )
        return SegOutput(scores=outs[self.outputs["scores"]], n_classes=self.n_classes)

    def manifest_text(self) -> str:
        lines = [
            f"task = {self.task}",
            f"n_classes = {self.n_classes}",
            f"image_size = {self.image_size}",
            f"anchors_per_cell = {self.anchors_per_cell}",
            f"seed = {self.seed}",
            "",
        ]
        lines += [spec.manifest_line(i) for i, spec in enumerate(self.layers)]
        return "\n".join(lines) + "\n"


def _kaiming(rng: np.random.Generator, co: int, ci: int, k: int) -> np.ndarray:
    std = math.sqrt(2.0 / (ci * k * k))
    return rng.normal(0.0, std, size=(co, ci, k, k))


def _init_params(layers: list[LayerSpec], seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for spec in layers:
        if spec.kind != "conv":
            continue
        params[f"conv{spec.conv_index}.w"] = Tensor(
            _kaiming(rng, spec.out_channels, spec.in_channels, spec.kernel)
        )
        params[f"conv{spec.conv_index}.b"] = Tensor(np.zeros(spec.out_channels))
    return params


_DETECTOR_WIDTHS = (12, 24, 32, 48)
_SEGMENTER_WIDTHS = (12, 24, 32)


def build_toy_detector(n_classes: int, image_size: int, anchors_per_cell: int = 1, seed: int = 0) -> BaseNetwork:
    """Three backbone conv+pool stages, one extra conv block, and parallel
    1x1 loc / conf heads over the resulting grid."""
    stride = 8
    if image_size % stride or image_size < 2 * stride:
        raise ShapeError(f"image size {image_size} not divisible by final stride {stride}")
    if n_classes < 1 or anchors_per_cell < 1:
        raise ShapeError("need at least one class and one anchor per cell")

    c1, c2, c3, ce = _DETECTOR_WIDTHS
    layers: list[LayerSpec] = []
    ci = 0
    for cin, cout in ((3, c1), (c1, c2), (c2, c3)):
        layers.append(LayerSpec("conv", "backbone", ci, cin, cout, kernel=3, stride=1, pad=1))
        layers.append(LayerSpec("relu", "backbone"))
        layers.append(LayerSpec("pool", "backbone", kernel=2, stride=2))
        ci += 1
    layers.append(LayerSpec("conv", "extra", ci, c3, ce, kernel=3, stride=1, pad=1))
    layers.append(LayerSpec("relu", "extra"))
    trunk = len(layers) - 1
    layers.append(
        LayerSpec("conv", "loc", ci + 1, ce, 4 * anchors_per_cell, kernel=1, stride=1, pad=0, input_from=trunk)
    )
    layers.append(
        LayerSpec(
            "conv",
            "conf",
            ci + 2,
            ce,
            (n_classes + 1) * anchors_per_cell,
            kernel=1,
            stride=1,
            pad=0,
            input_from=trunk,
        )
    )
    net = BaseNetwork(
        task="detection",
        n_classes=n_classes,
        image_size=image_size,
        layers=layers,
        outputs={"loc": len(layers) - 2, "conf": len(layers) - 1},
        params=_init_params(layers, seed),
        block_order=DETECTOR_BLOCKS,
        seed=seed,
        anchors_per_cell=anchors_per_cell,
        out_stride=stride,
    )
    return net


def build_toy_segmenter(n_classes: int, image_size: int, seed: int = 0) -> BaseNetwork:
    """Three conv+pool encoder stages, a 1x1 class head, and a bilinear
    decoder with one skip connection back to input resolution."""
    stride = 8
    if image_size % stride or image_size < 2 * stride:
        raise ShapeError(f"image size {image_size} not divisible by final stride {stride}")
    if n_classes < 1:
        raise ShapeError("need at least one class")

    c1, c2, c3 = _SEGMENTER_WIDTHS
    n_out = n_classes + 1
    layers: list[LayerSpec] = []
    ci = 0
    for cin, cout in ((3, c1), (c1, c2), (c2, c3)):
        layers.append(LayerSpec("conv", "encoder", ci, cin, cout, kernel=3, stride=1, pad=1))
        layers.append(LayerSpec("relu", "encoder"))
        layers.append(LayerSpec("pool", "encoder", kernel=2, stride=2))
        ci += 1
    skip_src = 5  # second encoder stage after pooling, stride 4
    layers.append(LayerSpec("conv", "head", ci, c3, n_out, kernel=1, stride=1, pad=0))
    layers.append(LayerSpec("upsample", "decoder", factor=2))
    up1 = len(layers) - 1
    layers.append(
        LayerSpec("conv", "head", ci + 1, c2, n_out, kernel=1, stride=1, pad=0, input_from=skip_src, add_to=up1)
    )
    layers.append(LayerSpec("upsample", "decoder", factor=4))
    return BaseNetwork(
        task="segmentation",
        n_classes=n_classes,
        image_size=image_size,
        layers=layers,
        outputs={"scores": len(layers) - 1},
        params=_init_params(layers, seed),
        block_order=SEGMENTER_BLOCKS,
        seed=seed,
        anchors_per_cell=0,
        out_stride=stride,
    )


# ---------------------------------------------------------------------------
# output decoding


def _nms(dets: list[Detection], nms_iou: float) -> list[Detection]:
    kept: list[Detection] = []
    for d in sorted(dets, key=lambda d: (-d.score, d.class_id, d.cell)):
        if all(iou(d.box, k.box) < nms_iou for k in kept):
            kept.append(d)
    return kept


def decode_detections(raw: DetectorOutput, conf_threshold: float, nms_iou: float) -> list[Detection]:
    """Grid outputs -> thresholded, per-class-NMS-filtered detections.

    Per cell and anchor the class is the argmax over foreground softmax
    scores; boxes are offsets from the cell center scaled by cell size,
    clipped to the image.
    """
    if not 0.0 <= conf_threshold <= 1.0 or not 0.0 <= nms_iou <= 1.0:
        raise ValueError("thresholds must lie in [0, 1]")
    if raw.batched:
        raise ShapeError("decode_detections expects a single image's outputs")
    g = raw.grid
    a = raw.anchors
    c1 = raw.n_classes + 1
    cell = raw.image_size / g
    conf = raw.conf.data.reshape(a, c1, g, g)
    loc = raw.loc.data.reshape(a, 4, g, g)

    z = conf - conf.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    fg = probs[:, 1:]  # drop background channel 0
    cls = fg.argmax(axis=1)
    score = np.take_along_axis(fg, cls[:, None], axis=1)[:, 0]

    dets: list[Detection] = []
    for ai, r, c in zip(*np.nonzero(score >= conf_threshold)):
        s = float(score[ai, r, c])
        tx, ty, tw, th = loc[ai, :, r, c]
        cx = (c + 0.5 + tx) * cell
        cy = (r + 0.5 + ty) * cell
        bw = cell * math.exp(min(max(tw, -8.0), 8.0))
        bh = cell * math.exp(min(max(th, -8.0), 8.0))
        x0 = min(max(cx - bw / 2, 0.0), raw.image_size)
        y0 = min(max(cy - bh / 2, 0.0), raw.image_size)
        x1 = min(max(cx + bw / 2, 0.0), raw.image_size)
        y1 = min(max(cy + bh / 2, 0.0), raw.image_size)
        if x0 < x1 and y0 < y1:
            dets.append(
                Detection((x0, y0, x1, y1), int(cls[ai, r, c]), s, cell=int(ai * g * g + r * g + c))
            )

    kept: list[Detection] = []
    for cid in sorted({d.class_id for d in dets}):
        kept.extend(_nms([d for d in dets if d.class_id == cid], nms_iou))
    kept.sort(key=lambda d: (-d.score, d.class_id, d.cell))
    return kept


def decode_labelmap(scores) -> np.ndarray:
    """Per-pixel argmax over class channels, lowest index on ties."""
    arr = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    if arr.ndim != 3:
        raise ShapeError(f"expected [C,H,W] scores, got shape {arr.shape}")
    return arr.argmax(axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# persistence: named-tensor archive + textual manifest


def save_network(net: BaseNetwork, path) -> None:
    save_archive(path, net.params)
    with open(f"{path}.manifest", "w", encoding="utf-8") as f:
        f.write(net.manifest_text())


def load_network(path) -> BaseNetwork:
    try:
        with open(f"{path}.manifest", encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"network manifest {path}.manifest not found")
    meta: dict[str, str] = {}
    layer_lines: list[str] = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" in line and not line.split()[0].isdigit():
            key, _, val = line.partition("=")
            meta[key.strip()] = val.strip()
        else:
            layer_lines.append(line)

    task = meta.get("task")
    if task == "detection":
        net = build_toy_detector(
            int(meta["n_classes"]), int(meta["image_size"]), int(meta["anchors_per_cell"]), int(meta["seed"])
        )
    elif task == "segmentation":
        net = build_toy_segmenter(int(meta["n_classes"]), int(meta["image_size"]), int(meta["seed"]))
    else:
        raise ValueError(f"unknown task {task!r} in manifest")

    want = [spec.manifest_line(i) for i, spec in enumerate(net.layers)]
    if want != layer_lines:
        raise ValueError("manifest layer list does not match the built architecture")

    arrays = load_archive(path)
    for name, t in net.params.items():
        if name not in arrays:
            raise ValueError(f"archive missing parameter {name}")
        if arrays[name].shape != t.data.shape:
            raise ValueError(f"archive parameter {name} has shape {arrays[name].shape}, expected {t.data.shape}")
        t.data = arrays[name]
    return net
