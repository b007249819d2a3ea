"""KL grade classifiers (two-view and single-view), balanced sampling and training."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .detect import DetectorSet
from .layers import ConvBlock, Dense, Model, load_model
from .optim import Adam, EarlyStopping, RestartResult, multi_restart_train
from .preprocess import PATCH_SIZE, AugmentSpec, Raster, augment, crop_patch, preprocess, resize_patch
from .tensor import Tensor

N_CLASSES = 5
log = logging.getLogger(__name__)


class _Classifier(Model):
    def __init__(self, views: Sequence[str], input_size: int = 256, widths: Sequence[int] = (16, 32, 64),
                 trunk_width: int = 128, trunk_blocks: int = 2, hidden: int = 128,
                 seed: int = 0, zero_head: bool = False):
        self.views = tuple(views)
        self.input_size = input_size
        self.config = dict(input_size=input_size, widths=list(widths), trunk_width=trunk_width,
                           trunk_blocks=trunk_blocks, hidden=hidden, seed=seed, zero_head=zero_head)
        rng = np.random.default_rng(seed)
        self.parts = []
        self.branches = {}
        for view in self.views:
            blocks, ch = [], 1
            for i, w in enumerate(widths):
                block = ConvBlock(ch, w, rng)
                self.parts.append((f"{view.lower()}.block{i}", block))
                blocks.append(block)
                ch = w
            self.branches[view] = blocks
        ch = widths[-1] * len(self.views)
        self.trunk = []
        for i in range(trunk_blocks):
            block = ConvBlock(ch, trunk_width, rng)
            self.parts.append((f"trunk.block{i}", block))
            self.trunk.append(block)
            ch = trunk_width
        self.fc1 = Dense(ch, hidden, rng)
        self.fc2 = Dense(hidden, N_CLASSES, rng, zero=zero_head)
        self.parts += [("fc1", self.fc1), ("fc2", self.fc2)]

    def _branch(self, view: str, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(_as_batch(x))
        if x.shape[-2:] != (self.input_size, self.input_size):
            raise ValueError(f"{view} patch is {x.shape[-2]}x{x.shape[-1]}, model expects "
                             f"{self.input_size}x{self.input_size}")
        for block in self.branches[view]:
            x = block(x)
        return x

    def _head(self, x: Tensor) -> Tensor:
        for block in self.trunk:
            x = block(x)
        x = F.relu(self.fc1(F.global_avg_pool(x)))
        return self.fc2(x)


def _as_batch(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a[:, None]
    return a


class MultiInputCNN(_Classifier):
    """One conv branch per view, channel concatenation, shared trunk, two dense layers."""

    kind = "multi_input_cnn"

    def __init__(self, **kwargs):
        super().__init__(("PA", "LAT"), **kwargs)

    def forward(self, pa, lat) -> Tensor:
        if lat is None:
            raise ValueError("multi-input model needs both PA and LAT patches")
        return self._head(F.channel_concat(self._branch("PA", pa), self._branch("LAT", lat)))


class SingleViewCNN(_Classifier):
    """The same branch, trunk and head applied to one view."""

    kind = "single_view_cnn"

    def __init__(self, view: str = "PA", **kwargs):
        if view not in ("PA", "LAT"):
            raise ValueError(f"view must be PA or LAT, got {view!r}")
        super().__init__((view,), **kwargs)
        self.config["view"] = view
        self.view = view

    def forward(self, pa, lat=None) -> Tensor:
        x = pa if self.view == "PA" else lat
        if x is None:
            raise ValueError(f"single-view model needs a {self.view} patch")
        return self._head(self._branch(self.view, x))


MODEL_REGISTRY = {MultiInputCNN.kind: MultiInputCNN, SingleViewCNN.kind: SingleViewCNN}


def load_classifier(path) -> _Classifier:
    return load_model(path, MODEL_REGISTRY)


def predict_grades(scores: np.ndarray) -> np.ndarray:
    """Argmax per row; ties resolve to the lower grade."""
    return np.argmax(np.asarray(scores), axis=1)


def classify_forward(model: _Classifier, pa, lat, batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Softmax confidence scores (N, 5) and predicted grades for patch batches (eval mode)."""
    model.eval()
    pa_b = None if pa is None else _as_batch(pa)
    lat_b = None if lat is None else _as_batch(lat)
    n = (pa_b if pa_b is not None else lat_b).shape[0]
    out = []
    for k in range(0, n, batch_size):
        sl = slice(k, k + batch_size)
        logits = model.forward(None if pa_b is None else pa_b[sl], None if lat_b is None else lat_b[sl])
        out.append(F.softmax(logits))
    scores = np.concatenate(out) if out else np.zeros((0, N_CLASSES))
    return scores, predict_grades(scores)


# --- data -------------------------------------------------------------------

@dataclass
class PatchSet:
    """Model-ready patch pairs with integer KL labels."""

    pa: np.ndarray  # (N, S, S) float32
    lat: np.ndarray
    labels: np.ndarray
    ids: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "PatchSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PatchSet(self.pa[idx], self.lat[idx], self.labels[idx],
                        [self.ids[i] for i in idx] if self.ids else [])

    @classmethod
    def concat(cls, sets: Sequence["PatchSet"]) -> "PatchSet":
        return cls(np.concatenate([s.pa for s in sets]), np.concatenate([s.lat for s in sets]),
                   np.concatenate([s.labels for s in sets]), [i for s in sets for i in s.ids])


def knee_patch(normalized: Raster, center: Tuple[float, float], size: int, mirror: bool) -> np.ndarray:
    """Crop 700 px around ``center`` from a normalised reference image and resize to ``size``."""
    p = resize_patch(crop_patch(normalized, center, PATCH_SIZE), size).samples
    return (p[:, ::-1] if mirror else p).astype(np.float32)


class BalancedSampler:
    """Draws a class uniformly, then a case of that class uniformly (with replacement)."""

    def __init__(self, labels, seed: int = 0, n_classes: int = N_CLASSES):
        labels = np.asarray(labels)
        self.by_class = [np.flatnonzero(labels == c) for c in range(n_classes)]
        empty = [c for c, idx in enumerate(self.by_class) if len(idx) == 0]
        if empty:
            raise ValueError(f"no training cases for KL grade(s) {empty}")
        self.rng = np.random.default_rng(seed)
        self.n_classes = n_classes

    def draw(self, batch_size: int) -> np.ndarray:
        classes = self.rng.integers(self.n_classes, size=batch_size)
        return np.array([self.by_class[c][self.rng.integers(len(self.by_class[c]))] for c in classes],
                        dtype=np.int64)


def balanced_batch(sampler: BalancedSampler, batch_size: int) -> np.ndarray:
    return sampler.draw(batch_size)


def build_balanced_validation(labels, seed: int = 0, n_classes: int = N_CLASSES) -> np.ndarray:
    """Indices of a class-balanced subset: min-class-count cases per class, without replacement."""
    labels = np.asarray(labels)
    by_class = [np.flatnonzero(labels == c) for c in range(n_classes)]
    empty = [c for c, idx in enumerate(by_class) if len(idx) == 0]
    if empty:
        raise ValueError(f"no validation cases for KL grade(s) {empty}")
    m = min(len(idx) for idx in by_class)
    rng = np.random.default_rng(seed)
    return np.concatenate([np.sort(rng.choice(idx, size=m, replace=False)) for idx in by_class])


# --- training -----------------------------------------------------------------

@dataclass
class ClassifierTrainConfig:
    lr: float = 1e-5
    batch_size: int = 16
    patience: int = 20
    warmup_epochs: int = 10  # epochs without augmentation
    max_epochs: int = 300
    restarts: int = 10
    batches_per_epoch: Optional[int] = None  # default: ceil(len(train) / batch_size)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0


@dataclass
class TrainHistory:
    rows: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = 0.0

    def to_csv(self) -> str:
        lines = ["epoch,phase,loss,val_accuracy,seconds"]
        for r in self.rows:
            lines.append(f"{r['epoch']},{r['phase']},{r['loss']:.6f},{r['val_accuracy']:.6f},{r['seconds']:.3f}")
        return "\n".join(lines) + "\n"


def evaluate_accuracy(model: _Classifier, data: PatchSet) -> float:
    _, pred = classify_forward(model, data.pa, data.lat)
    return float(np.mean(pred == data.labels))


def train_classifier(model: _Classifier, train: PatchSet, val: PatchSet,
                     config: ClassifierTrainConfig = ClassifierTrainConfig(),
                     on_epoch: Optional[Callable[[dict], None]] = None) -> Tuple[_Classifier, TrainHistory]:
    """Balanced-batch Adam training with an augmentation-free warm-up; early stopping on val accuracy."""
    sampler = BalancedSampler(train.labels, seed=config.seed)
    aug_rng = np.random.default_rng([config.seed, 1])
    opt = Adam(model.parameters(), lr=config.lr)
    stopper = EarlyStopping(config.patience, "maximize")
    history = TrainHistory()
    n_batches = config.batches_per_epoch or max(1, math.ceil(len(train) / config.batch_size))
    uses_pa = "PA" in model.views
    uses_lat = "LAT" in model.views
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        phase = "plain" if epoch <= config.warmup_epochs else "augment"
        model.train()
        total = 0.0
        for _ in range(n_batches):
            idx = sampler.draw(config.batch_size)
            pa = train.pa[idx].astype(np.float64) if uses_pa else None
            lat = train.lat[idx].astype(np.float64) if uses_lat else None
            if phase == "augment":
                for k in range(len(idx)):
                    a, b = augment(None if pa is None else pa[k], None if lat is None else lat[k],
                                   config.augment, aug_rng)
                    if pa is not None:
                        pa[k] = a
                    if lat is not None:
                        lat[k] = b
            loss = F.softmax_cross_entropy(model.forward(pa, lat), train.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        score = evaluate_accuracy(model, val)
        row = dict(epoch=epoch, phase=phase, loss=total / n_batches, val_accuracy=score,
                   seconds=time.perf_counter() - t0)
        history.rows.append(row)
        if on_epoch:
            on_epoch(row)
        log.info("classifier epoch %d (%s) loss %.4f val acc %.4f", epoch, phase, row["loss"], score)
        if stopper.update(score, model.state_dict):
            break
    model.load_state_dict(stopper.best_checkpoint)
    history.best_epoch = stopper.best_epoch
    history.best_val_accuracy = float(stopper.best_score)
    return model.eval(), history


def train_with_restarts(make_model: Callable[[int], _Classifier], train: PatchSet, val: PatchSet,
                        config: ClassifierTrainConfig = ClassifierTrainConfig()) -> Tuple[RestartResult, List[TrainHistory]]:
    """Train ``config.restarts`` models from different seeds and keep the best on validation."""
    histories = []

    def run(seed):
        cfg = ClassifierTrainConfig(**{**config.__dict__, "seed": seed})
        model, hist = train_classifier(make_model(seed), train, val, cfg)
        histories.append(hist)
        return model, hist.best_val_accuracy

    seeds = [config.seed + i for i in range(config.restarts)]
    return multi_restart_train(run, config.restarts, seeds), histories


# --- end-to-end inference -------------------------------------------------------

@dataclass
class PipelineResult:
    exam_id: str
    grade: Optional[int]
    scores: Optional[np.ndarray]
    centers: Dict[str, Tuple[float, float]]
    error: Optional[str] = None


def predict_pipeline(detectors: Optional[DetectorSet], classifier: _Classifier, exams: Sequence[dict],
                     canonicalize: bool = True) -> List[PipelineResult]:
    """Grade raw exams end to end.

    Each exam is a dict with ``id``, ``side``, ``PA`` and ``LAT`` rasters at
    any spacing and, for the ground-truth-centre ablation, ``centers`` per
    view in reference pixels. Failures are reported per exam.
    """
    results = []
    for exam in exams:
        exam_id = exam.get("id", "?")
        try:
            patches, centers = {}, {}
            for view in ("PA", "LAT"):
                raw = exam.get(view)
                if raw is None:
                    if view in classifier.views:
                        raise ValueError(f"exam {exam_id} has no {view} image")
                    continue
                if view not in classifier.views:
                    continue
                norm = preprocess(raw)
                if exam.get("centers") and view in exam["centers"]:
                    center = tuple(exam["centers"][view])
                elif detectors is not None:
                    center = detectors.detect(norm, view, exam["side"]).center
                else:
                    raise ValueError(f"exam {exam_id}: no detector and no centre for {view}")
                centers[view] = center
                patches[view] = knee_patch(norm, center, classifier.input_size,
                                           mirror=canonicalize and exam["side"] == "left")
            scores, grades = classify_forward(classifier, patches.get("PA"), patches.get("LAT"))
            results.append(PipelineResult(exam_id, int(grades[0]), scores[0], centers))
        except (ValueError, KeyError) as exc:
            results.append(PipelineResult(exam_id, None, None, {}, str(exc)))
    return results
