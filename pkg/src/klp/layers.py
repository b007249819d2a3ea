"""Parameter containers shared by the detector and the classifiers."""

from __future__ import annotations

import copy
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F
from .io import load_checkpoint, save_checkpoint
from .tensor import Tensor


class ConvBlock:
    """conv 3x3 -> batchnorm -> ReLU, optionally followed by 2x2 max-pooling."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, pool: bool = True):
        self.conv = F.ConvParams.init(in_ch, out_ch, rng)
        self.bn = F.BatchNormState.init(out_ch)
        self.pool = pool

    def __call__(self, x: Tensor) -> Tensor:
        x = F.relu(F.batchnorm2d(F.conv2d(x, self.conv), self.bn))
        # a trunk block on a map already reduced to 1x1 has nothing left to pool
        if self.pool and min(x.shape[2:]) >= 2:
            x = F.maxpool2d(x, 2, 2)
        return x

    def named_tensors(self, prefix: str) -> Iterator[Tuple[str, object]]:
        yield f"{prefix}.conv.weight", self.conv.weight
        yield f"{prefix}.conv.bias", self.conv.bias
        yield f"{prefix}.bn.gamma", self.bn.gamma
        yield f"{prefix}.bn.beta", self.bn.beta
        yield f"{prefix}.bn.running_mean", (self.bn, "running_mean")
        yield f"{prefix}.bn.running_var", (self.bn, "running_var")

    def batchnorms(self):
        yield self.bn


class Dense:
    def __init__(self, in_f: int, out_f: int, rng: Optional[np.random.Generator], zero: bool = False):
        if zero or rng is None:
            w = np.zeros((out_f, in_f))
        else:
            w = rng.standard_normal((out_f, in_f)) * np.sqrt(2.0 / in_f)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_f), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def named_tensors(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias

    def batchnorms(self):
        return iter(())


class Model:
    """Base for networks built from :class:`ConvBlock` and :class:`Dense` parts.

    Subclasses list their parts in ``self.parts`` as (name, part) pairs and
    keep a JSON-serialisable ``self.config``.
    """

    kind = "model"
    parts: List[tuple]
    config: dict

    def named_tensors(self):
        for name, part in self.parts:
            yield from part.named_tensors(name)

    def parameters(self) -> List[Tensor]:
        out = []
        for name, t in self.named_tensors():
            if isinstance(t, Tensor):
                t.name = name
                out.append(t)
        return out

    def batchnorms(self):
        for _, part in self.parts:
            yield from part.batchnorms()

    def train(self):
        for bn in self.batchnorms():
            bn.mode = "train"
        return self

    def eval(self):
        for bn in self.batchnorms():
            bn.mode = "eval"
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, t in self.named_tensors():
            out[name] = (t.data if isinstance(t, Tensor) else getattr(*t)).copy()
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for name, t in self.named_tensors():
            if name not in state:
                raise KeyError(f"state is missing {name}")
            if isinstance(t, Tensor):
                if state[name].shape != t.shape:
                    raise ValueError(f"{name}: shape {state[name].shape} does not match {t.shape}")
                t.data = np.array(state[name], dtype=np.float64)
            else:
                setattr(t[0], t[1], np.array(state[name], dtype=np.float64))
        return self

    def clone(self):
        return copy.deepcopy(self)

    def save(self, path):
        save_checkpoint(path, self.state_dict(), {
            "kind": self.kind, "config": self.config, "layers": [name for name, _ in self.parts]})


def load_model(path, registry: Dict[str, type]):
    arrays, meta = load_checkpoint(path)
    cls = registry.get(meta.get("kind"))
    if cls is None:
        raise ValueError(f"{path}: unknown model kind {meta.get('kind')!r}")
    model = cls(**meta["config"])
    model.load_state_dict(arrays)
    return model.eval()
