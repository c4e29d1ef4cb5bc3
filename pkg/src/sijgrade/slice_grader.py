"""Per-rectangle slice grading: grade groupings and the three-block slice CNN."""
from __future__ import annotations

import copy
import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .augment import AugmentParams, augment_image

RECT_SHAPE = (100, 200)
WEIGHTS_VERSION = 1


class GroupingScheme(str, enum.Enum):
    TWO = "two"
    THREE = "three"
    FIVE = "five"

    @property
    def n_classes(self) -> int:
        return {"two": 2, "three": 3, "five": 5}[self.value]


_GROUPING = {
    GroupingScheme.TWO: (0, 0, 1, 1, 1),
    GroupingScheme.THREE: (0, 0, 1, 2, 2),
    GroupingScheme.FIVE: (0, 1, 2, 3, 4),
}


def map_grade(grade: int, scheme) -> int:
    """Map a 0-4 slice grade to its class index under ``scheme``."""
    scheme = GroupingScheme(scheme)
    if int(grade) != grade or not 0 <= grade <= 4:
        raise ValueError(f"slice grade must be an integer in [0, 4], got {grade}")
    return _GROUPING[scheme][int(grade)]


def map_grades(grades, scheme) -> np.ndarray:
    g = np.asarray(grades)
    if g.size and (g.min() < 0 or g.max() > 4):
        raise ValueError("slice grades must lie in [0, 4]")
    return np.asarray(_GROUPING[GroupingScheme(scheme)], dtype=np.int64)[g.astype(np.int64)]


@dataclass
class CnnConfig:
    num_classes: int = 5
    channels: Tuple[int, int, int] = (16, 32, 64)
    hidden: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.0
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    input_shape: Tuple[int, int] = RECT_SHAPE

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.num_classes not in (2, 3, 5):
            raise ValueError(f"num_classes must be 2, 3 or 5, got {self.num_classes}")
        if len(self.channels) != 3 or min(self.channels) < 1 or self.hidden < 1:
            raise ValueError("three positive channel counts and a positive hidden width required")
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid optimizer settings")
        if min(self.input_shape) < 8:
            raise ValueError("input must be at least 8x8")


class SliceCNN(nn.Module):
    """3 x [conv3x3+ReLU, maxpool 2x2, batch-norm] then FC(hidden)+ReLU and FC(m)."""

    def __init__(self, cfg: CnnConfig):
        super().__init__()
        layers: List[nn.Module] = []
        c_in = 1
        for c in cfg.channels:
            layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2), nn.BatchNorm2d(c)]
            c_in = c
        self.features = nn.Sequential(*layers)
        h, w = cfg.input_shape
        for _ in range(3):
            h, w = h // 2, w // 2
        self.fc1 = nn.Linear(c_in * h * w, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, cfg.num_classes)

    def forward(self, x):
        x = self.features(x).flatten(1)
        return self.fc2(torch.relu(self.fc1(x)))


def _as_images(items) -> np.ndarray:
    if isinstance(items, np.ndarray):
        arr = items
    else:
        arr = np.stack([getattr(it, "pixels", it) for it in items])
    if arr.ndim == 2:
        arr = arr[None]
    return np.asarray(arr, dtype=np.float32)


class SliceGrader:
    """Slice CNN plus the bookkeeping needed to train, run and persist it."""

    def __init__(self, cfg: CnnConfig, scheme=None):
        self.cfg = cfg
        if scheme is None:
            scheme = {2: "two", 3: "three", 5: "five"}[cfg.num_classes]
        self.scheme = GroupingScheme(scheme)
        if self.scheme.n_classes != cfg.num_classes:
            raise ValueError(f"scheme {self.scheme.value} has {self.scheme.n_classes} classes, "
                             f"config says {cfg.num_classes}")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.net = SliceCNN(cfg)
        self.net.eval()
        self.trained = False
        self.epochs_done = 0
        self._opt = None

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    # -- inference -------------------------------------------------------
    @torch.no_grad()
    def logits(self, items, batch_size: int = 256) -> np.ndarray:
        imgs = _as_images(items)
        if imgs.shape[1:] != tuple(self.cfg.input_shape):
            raise ValueError(f"expected images of shape {self.cfg.input_shape}, got {imgs.shape[1:]}")
        self.net.eval()
        out = []
        for i in range(0, len(imgs), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(imgs[i:i + batch_size]))[:, None]
            out.append(self.net(x).double().numpy())
        if not out:
            return np.zeros((0, self.num_classes))
        return np.concatenate(out)

    def predict_proba(self, items) -> np.ndarray:
        z = self.logits(items)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, items) -> np.ndarray:
        return np.argmax(self.predict_proba(items), axis=1)

    def grade(self, rect) -> np.ndarray:
        return self.predict_proba([rect])[0]

    def embed(self, items) -> np.ndarray:
        """Final pre-softmax activations, one m-vector per rectangle."""
        return self.logits(items)

    # -- training --------------------------------------------------------
    def _optimizer(self):
        if self._opt is None:
            self._opt = torch.optim.SGD(self.net.parameters(), lr=self.cfg.learning_rate,
                                        momentum=self.cfg.momentum)
        return self._opt

    def train_epoch(self, images, labels, aug: Optional[AugmentParams] = None) -> float:
        """One pass of mini-batch SGD over freshly augmented copies; returns the mean loss."""
        imgs = _as_images(images)
        y = np.asarray(labels, dtype=np.int64)
        if len(imgs) != len(y) or len(y) == 0:
            raise ValueError("images and labels must be non-empty and of equal length")
        missing = sorted(set(range(self.num_classes)) - set(np.unique(y).tolist()))
        if missing:
            raise ValueError(f"classes {missing} absent from the training set")
        epoch = self.epochs_done
        order = np.random.default_rng([self.cfg.seed, epoch, 0]).permutation(len(y))
        if aug is not None:
            imgs = np.stack([
                augment_image(imgs[i], aug, np.random.default_rng([self.cfg.seed, epoch, 1, i]))
                for i in range(len(imgs))
            ]).astype(np.float32)
        opt = self._optimizer()
        loss_fn = nn.CrossEntropyLoss()
        self.net.train()
        total, n_seen = 0.0, 0
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            if len(idx) < 2:
                # batch-norm needs more than one sample per batch
                continue
            x = torch.from_numpy(imgs[idx])[:, None]
            t = torch.from_numpy(y[idx])
            opt.zero_grad()
            loss = loss_fn(self.net(x), t)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            n_seen += len(idx)
        self.net.eval()
        self.epochs_done += 1
        self.trained = True
        return total / max(n_seen, 1)

    # -- state -----------------------------------------------------------
    def state(self) -> dict:
        return {k: v.detach().clone() for k, v in self.net.state_dict().items()}

    def load_state(self, state: dict) -> None:
        self.net.load_state_dict(state)
        self.net.eval()
        self.trained = True

    def copy(self) -> "SliceGrader":
        g = SliceGrader(copy.deepcopy(self.cfg), self.scheme)
        g.load_state(self.state())
        g.trained = self.trained
        g.epochs_done = self.epochs_done
        return g

    def save(self, prefix) -> None:
        meta = {"kind": "slice_cnn", "config": asdict(self.cfg), "scheme": self.scheme.value,
                "epochs_done": self.epochs_done}
        save_weights(prefix, self.net, meta)

    @classmethod
    def load(cls, prefix) -> "SliceGrader":
        meta = read_weights_manifest(prefix)
        cfg = CnnConfig(**meta["meta"]["config"])
        g = cls(cfg, meta["meta"]["scheme"])
        load_weights(prefix, g.net)
        g.trained = True
        g.epochs_done = meta["meta"].get("epochs_done", 0)
        return g


def build_slice_cnn(cfg: CnnConfig, scheme=None) -> SliceGrader:
    return SliceGrader(cfg, scheme)


def train_slice_grader(g: SliceGrader, images, labels, cfg: Optional[CnnConfig] = None,
                       aug: Optional[AugmentParams] = None, epochs: Optional[int] = None):
    """Train for ``epochs`` (default ``cfg.epochs``); returns ``(g, loss_trace)``."""
    cfg = cfg or g.cfg
    n = cfg.epochs if epochs is None else epochs
    trace = [g.train_epoch(images, labels, aug) for _ in range(n)]
    return g, trace


# --- weight container ------------------------------------------------------

def save_weights(prefix, module: nn.Module, meta: dict) -> None:
    """Little-endian float32 blob plus a JSON manifest naming each tensor."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in module.state_dict().items():
        if not t.is_floating_point():
            continue
        arr = t.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": "sijgrade-weights", "version": WEIGHTS_VERSION,
                "dtype": "f32-le", "tensors": entries, "meta": meta}
    prefix.with_suffix(".bin").write_bytes(b"".join(chunks))
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_weights_manifest(prefix) -> dict:
    m = json.loads(Path(prefix).with_suffix(".json").read_text())
    if m.get("format") != "sijgrade-weights" or m.get("version") != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weight container at {prefix}")
    return m


def load_weights(prefix, module: nn.Module) -> None:
    m = read_weights_manifest(prefix)
    blob = Path(prefix).with_suffix(".bin").read_bytes()
    state = module.state_dict()
    for e in m["tensors"]:
        if e["name"] not in state:
            raise ValueError(f"unexpected tensor {e['name']}")
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        target = state[e["name"]]
        if tuple(target.shape) != tuple(arr.shape):
            raise ValueError(f"shape mismatch for {e['name']}")
        state[e["name"]] = torch.from_numpy(arr.copy()).to(target.dtype)
    module.load_state_dict(state)


# --- gradient check --------------------------------------------------------

def gradient_check(cfg: CnnConfig, batch: int = 4, eps: float = 1e-6, seed: int = 0,
                   floor: float = 1e-6) -> float:
    """Max relative error between autograd and central finite differences.

    Runs a float64 copy of the network in training mode (batch statistics in
    the batch-norm layers) on random inputs with cross-entropy loss.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = SliceCNN(cfg).double()
        x = torch.rand(batch, 1, *cfg.input_shape, dtype=torch.float64)
        y = torch.randint(0, cfg.num_classes, (batch,))
    net.train()
    loss_fn = nn.CrossEntropyLoss()

    def loss():
        return loss_fn(net(x), y)

    net.zero_grad()
    loss().backward()
    worst = 0.0
    with torch.no_grad():
        for p in net.parameters():
            analytic = p.grad.detach().clone().view(-1)
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss().item()
                flat[i] = old - eps
                down = loss().item()
                flat[i] = old
                num = (up - down) / (2 * eps)
                a = analytic[i].item()
                rel = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, rel)
    return worst
