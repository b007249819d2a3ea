"""Knee-joint localisation with a grid proposal network and IoU evaluation.

The detector scores every cell of a G x G grid laid over the (resized)
radiograph for "contains the joint centre" and regresses the centre's
position inside the cell. The highest-scoring cell gives the detection; the
box is always a 1000 px square (200 mm) at reference spacing.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .layers import ConvBlock, Model, load_model
from .optim import Adam, EarlyStopping
from .preprocess import Raster, resize
from .tensor import Tensor, make_result

BOX_SIDE = 1000.0
DETECTOR_INPUT = 512

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    @classmethod
    def around(cls, center: Tuple[float, float], side: float = BOX_SIDE) -> "Box":
        cx, cy = center
        h = side / 2.0
        return cls(cx - h, cy - h, cx + h, cy + h)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two axis-aligned boxes."""
    for box in (a, b):
        if not (box.x1 > box.x0 and box.y1 > box.y0):
            raise ValueError(f"degenerate box {box}")
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (a.area + b.area - inter))


@dataclass(frozen=True)
class Detection:
    center: Tuple[float, float]
    score: float
    cell: Tuple[int, int] = (0, 0)

    @property
    def box(self) -> Box:
        return Box.around(self.center)


class _Head:
    """1x1 convolution producing objectness and two offset channels per cell."""

    def __init__(self, in_ch: int, rng: np.random.Generator, grid: int):
        self.conv = F.ConvParams.init(in_ch, 3, rng, kernel=1)
        # start objectness at the prior of one positive cell per image
        self.conv.bias.data[0] = -math.log(grid * grid - 1)

    def __call__(self, x):
        return F.conv2d(x, self.conv)

    def named_tensors(self, prefix):
        yield f"{prefix}.weight", self.conv.weight
        yield f"{prefix}.bias", self.conv.bias

    def batchnorms(self):
        return iter(())


class GridDetector(Model):
    """Fixed average-pool stem, conv blocks down to the grid, extra blocks, 1x1 head."""

    kind = "grid_detector"

    def __init__(self, grid: int = 16, input_size: int = DETECTOR_INPUT, stem_pool: int = 4,
                 widths: Sequence[int] = (8, 16, 32), extra: Sequence[int] = (32, 32),
                 seed: int = 0, view: str = "PA", side: str = "right"):
        reduced = input_size // stem_pool
        if input_size % stem_pool or reduced != grid * 2 ** len(widths):
            raise ValueError(f"input {input_size} / stem {stem_pool} / 2^{len(widths)} pools does not give a {grid}x{grid} grid")
        self.config = dict(grid=grid, input_size=input_size, stem_pool=stem_pool, widths=list(widths),
                           extra=list(extra), seed=seed, view=view, side=side)
        self.grid, self.input_size, self.stem_pool = grid, input_size, stem_pool
        rng = np.random.default_rng(seed)
        self.parts = []
        ch = 1
        for i, w in enumerate(widths):
            self.parts.append((f"down{i}", ConvBlock(ch, w, rng, pool=True)))
            ch = w
        for i, w in enumerate(extra):
            self.parts.append((f"ctx{i}", ConvBlock(ch, w, rng, pool=False)))
            ch = w
        self.parts.append(("head", _Head(ch, rng, grid)))

    @property
    def cell(self) -> float:
        return self.input_size / self.grid

    def forward(self, x: Tensor) -> Tensor:
        """(N, 1, S, S) image batch -> (N, 3, G, G) raw outputs."""
        if self.stem_pool > 1:
            x = F.avgpool2d(x, self.stem_pool)
        for _, part in self.parts:
            x = part(x)
        return x


@dataclass
class DetectorInput:
    image: np.ndarray  # (S, S) float32, zero-padded
    factor: float  # detector px per reference px
    center: Optional[Tuple[float, float]] = None  # true centre in reference px
    valid_width: int = 0  # unpadded width in detector px


def prepare_input(img: Raster, size: int = DETECTOR_INPUT, center=None) -> DetectorInput:
    """Resize a normalised reference-spacing image so its longest side is ``size`` and pad to square."""
    h, w = img.samples.shape
    f = size / max(h, w)
    nh, nw = max(1, int(round(h * f))), max(1, int(round(w * f)))
    out = np.zeros((size, size), dtype=np.float32)
    out[:nh, :nw] = resize(img.samples, nh, nw)
    return DetectorInput(out, f, center, nw)


def decode(raw: np.ndarray, grid: int, cell: float, factor: float) -> List[Detection]:
    """All G*G candidates of one image, in row-major cell order, in reference px."""
    score = 1.0 / (1.0 + np.exp(-raw[0]))
    off = 1.0 / (1.0 + np.exp(-raw[1:3]))
    dets = []
    for i in range(grid):
        for j in range(grid):
            x = (j + off[0, i, j]) * cell / factor
            y = (i + off[1, i, j]) * cell / factor
            dets.append(Detection((float(x), float(y)), float(score[i, j]), (i, j)))
    return dets


def detector_forward(model: GridDetector, image) -> List[Detection]:
    """Candidates for one image (a :class:`Raster` at reference spacing or a prepared input)."""
    inp = image if isinstance(image, DetectorInput) else prepare_input(image, model.input_size)
    model.eval()
    raw = model.forward(Tensor(inp.image[None, None].astype(np.float64))).data[0]
    return decode(raw, model.grid, model.cell, inp.factor)


def select_detection(candidates: Sequence[Detection]) -> Detection:
    """Highest score wins; ties go to the earliest candidate."""
    if not candidates:
        raise ValueError("no candidate detections")
    best = candidates[0]
    for c in candidates[1:]:
        if c.score > best.score:
            best = c
    return best


def detect_batch(model: GridDetector, inputs: Sequence[DetectorInput], batch_size: int = 16) -> List[Detection]:
    model.eval()
    out = []
    for k in range(0, len(inputs), batch_size):
        chunk = inputs[k:k + batch_size]
        x = np.stack([c.image for c in chunk])[:, None].astype(np.float64)
        raw = model.forward(Tensor(x)).data
        for r, c in zip(raw, chunk):
            out.append(select_detection(decode(r, model.grid, model.cell, c.factor)))
    return out


def targets_for(model: GridDetector, inputs: Sequence[DetectorInput]):
    g = model.grid
    n = len(inputs)
    obj = np.zeros((n, g, g))
    off = np.zeros((n, 2, g, g))
    mask = np.zeros((n, 2, g, g))
    for k, inp in enumerate(inputs):
        if inp.center is None:
            raise ValueError(f"training image {k} has no annotated centre")
        px = np.array(inp.center) * inp.factor / model.cell
        j, i = (int(np.clip(np.floor(v), 0, g - 1)) for v in px)
        obj[k, i, j] = 1.0
        off[k, :, i, j] = np.clip(px - (j, i), 0.0, 1.0 - 1e-6)
        mask[k, :, i, j] = 1.0
    return obj, off, mask


def detection_loss(model: GridDetector, raw: Tensor, inputs: Sequence[DetectorInput],
                   offset_weight: float = 1.0) -> Tensor:
    """Summed objectness BCE over cells plus squared offset error on the positive cell, per image."""
    obj, off, mask = targets_for(model, inputs)
    n = raw.shape[0]
    objectness = _channels(raw, 0, 1)
    offsets = F.sigmoid(_channels(raw, 1, 3))
    loss = F.bce_with_logits(objectness.reshape(n, -1), obj.reshape(n, -1), "sum")
    loss = loss + F.masked_squared_error(offsets, off, mask) * offset_weight
    return loss * (1.0 / n)


def _channels(x: Tensor, lo: int, hi: int) -> Tensor:
    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, lo:hi] = g
        return (gx,)

    return make_result(x.data[:, lo:hi].copy(), (x,), backward)


@dataclass
class DetectorTrainConfig:
    batch_size: int = 4
    lr: float = 1e-4
    patience: int = 20
    max_epochs: int = 200
    offset_weight: float = 1.0
    seed: int = 0


@dataclass
class DetectorHistory:
    epochs: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_iou: float = 0.0

    def to_csv(self) -> str:
        lines = ["epoch,loss,val_mean_iou,seconds"]
        for e in self.epochs:
            lines.append(f"{e['epoch']},{e['loss']:.6f},{e['val_mean_iou']:.6f},{e['seconds']:.3f}")
        return "\n".join(lines) + "\n"


def mean_iou(model: GridDetector, inputs: Sequence[DetectorInput]) -> float:
    dets = detect_batch(model, inputs)
    return float(np.mean([iou(d.box, Box.around(inp.center)) for d, inp in zip(dets, inputs)]))


def train_detector(model: GridDetector, train: Sequence[DetectorInput], val: Sequence[DetectorInput],
                   config: DetectorTrainConfig = DetectorTrainConfig()) -> Tuple[GridDetector, DetectorHistory]:
    """Adam on the detection loss, early-stopped on validation mean IoU; returns the best snapshot."""
    for k, inp in enumerate(list(train) + list(val)):
        if inp.center is None:
            raise ValueError(f"image {k} has no annotated centre")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), lr=config.lr)
    stopper = EarlyStopping(config.patience, "maximize")
    history = DetectorHistory()
    n = len(train)
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(n)
        total = 0.0
        for k in range(0, n, config.batch_size):
            idx = order[k:k + config.batch_size]
            if len(idx) < 2:  # batchnorm needs two samples
                continue
            batch = [train[i] for i in idx]
            x = Tensor(np.stack([b.image for b in batch])[:, None].astype(np.float64))
            loss = detection_loss(model, model.forward(x), batch, config.offset_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        score = mean_iou(model, val)
        history.epochs.append(dict(epoch=epoch, loss=total / n, val_mean_iou=score,
                                   seconds=time.perf_counter() - t0))
        log.info("detector epoch %d loss %.4f val IoU %.4f", epoch, total / n, score)
        if stopper.update(score, model.state_dict):
            break
    model.load_state_dict(stopper.best_checkpoint)
    history.best_epoch = stopper.best_epoch
    history.best_val_iou = float(stopper.best_score)
    return model.eval(), history


def evaluate_detection(model: GridDetector, test: Sequence[DetectorInput]) -> Dict[str, float]:
    """Fraction of images with IoU >= 0.75 and IoU mean/std (population) on the 0-100 scale."""
    if not test:
        raise ValueError("empty detection test set")
    dets = detect_batch(model, test)
    ious = np.array([iou(d.box, Box.around(inp.center)) for d, inp in zip(dets, test)])
    return {
        "n": int(len(ious)),
        "fraction_iou_ge_0.75": float(np.mean(ious >= 0.75)),
        "mean_iou": float(100.0 * ious.mean()),
        "std_iou": float(100.0 * ious.std()),
    }


def flip_input(inp: DetectorInput) -> DetectorInput:
    """Mirror left-right inside the valid (unpadded) area; the centre follows."""
    img = inp.image
    valid_w = inp.valid_width or img.shape[1]
    out = img.copy()
    out[:, :valid_w] = img[:, :valid_w][:, ::-1]
    center = None
    if inp.center is not None:
        width_ref = valid_w / inp.factor
        center = (width_ref - inp.center[0], inp.center[1])
    return DetectorInput(out, inp.factor, center, valid_w)


class DetectorSet:
    """Detectors keyed by (view, side), or one shared model per view with left images mirrored."""

    def __init__(self, models: Dict[Tuple[str, str], GridDetector], shared: bool = False):
        self.models = models
        self.shared = shared

    def model_for(self, view: str, side: str) -> GridDetector:
        key = (view, "right") if self.shared else (view, side)
        if key not in self.models:
            raise KeyError(f"no detector for view={view} side={side}")
        return self.models[key]

    def detect(self, img, view: str, side: str) -> Detection:
        model = self.model_for(view, side)
        inp = img if isinstance(img, DetectorInput) else prepare_input(img, model.input_size)
        if self.shared and side == "left":
            flipped = flip_input(inp)
            d = select_detection(detector_forward(model, flipped))
            width_ref = (inp.valid_width or inp.image.shape[1]) / inp.factor
            return Detection((float(width_ref - d.center[0]), d.center[1]), d.score, d.cell)
        return select_detection(detector_forward(model, inp))

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for (view, side), m in sorted(self.models.items()):
            m.save(d / f"detector_{view}_{side}.klpw")

    @classmethod
    def load(cls, directory, shared: bool = False) -> "DetectorSet":
        models = {}
        for p in sorted(Path(directory).glob("detector_*_*.klpw")):
            m = load_model(p, {GridDetector.kind: GridDetector})
            models[(m.config["view"], m.config["side"])] = m
        if not models:
            raise FileNotFoundError(f"no detector checkpoints in {directory}")
        return cls(models, shared)
