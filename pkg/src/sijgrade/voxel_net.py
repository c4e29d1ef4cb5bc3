"""Small 2-D encoder-decoder used as the SIJ voxel classifier.

Input is the HU triplet (previous, current, next slice) as three channels;
output is a per-pixel SIJ probability map of the same in-plane shape.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .augment import AugmentParams, augment_image
from .roi import HU_WINDOW, normalize_hu
from .slice_grader import load_weights, read_weights_manifest, save_weights


@dataclass
class UNetConfig:
    base_channels: int = 8
    levels: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 4
    pos_weight: float = 10.0
    crop: Optional[Tuple[int, int]] = (96, 128)   # training crop (rows, cols); None = whole slice
    positive_crop_fraction: float = 0.7
    seed: int = 0


def _double_conv(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(),
        nn.Conv2d(c_out, c_out, 3, padding=1), nn.ReLU(),
    )


class UNet2d(nn.Module):
    def __init__(self, cfg: UNetConfig, in_channels: int = 3):
        super().__init__()
        chans = [cfg.base_channels * 2 ** i for i in range(cfg.levels)]
        self.down = nn.ModuleList()
        c = in_channels
        for ch in chans:
            self.down.append(_double_conv(c, ch))
            c = ch
        self.up = nn.ModuleList()
        for ch in reversed(chans[:-1]):
            self.up.append(_double_conv(c + ch, ch))
            c = ch
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < len(self.down) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for block in self.up:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)[:, 0]


class UNetVoxelClassifier:
    """Voxel-classifier contract backed by :class:`UNet2d`."""

    def __init__(self, cfg: UNetConfig = UNetConfig()):
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.net = UNet2d(cfg)
        self.net.eval()
        self.trained = False

    def _prep(self, triplets: np.ndarray) -> torch.Tensor:
        x = normalize_hu(np.asarray(triplets, dtype=np.float32), HU_WINDOW).astype(np.float32)
        return torch.from_numpy(np.ascontiguousarray(x))

    def _padded(self, x: torch.Tensor):
        m = 2 ** (self.cfg.levels - 1)
        h, w = x.shape[-2:]
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        return x, h, w

    def _crop(self, stack: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Random training window, centred on a labelled pixel with some probability."""
        if self.cfg.crop is None:
            return stack
        h, w = stack.shape[-2:]
        ch, cw = min(self.cfg.crop[0], h), min(self.cfg.crop[1], w)
        pos = np.argwhere(stack[-1] > 0.5)
        if len(pos) and rng.random() < self.cfg.positive_crop_fraction:
            cy, cx = pos[rng.integers(len(pos))]
            r0 = int(np.clip(cy - ch // 2 + rng.integers(-ch // 4, ch // 4 + 1), 0, h - ch))
            c0 = int(np.clip(cx - cw // 2 + rng.integers(-cw // 4, cw // 4 + 1), 0, w - cw))
        else:
            r0, c0 = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
        return stack[..., r0:r0 + ch, c0:c0 + cw]

    @torch.no_grad()
    def predict_batch(self, triplets: np.ndarray, batch_size: int = 4) -> np.ndarray:
        triplets = np.asarray(triplets)
        if triplets.ndim != 4 or triplets.shape[1] != 3:
            raise ValueError("expected an (n, 3, h, w) stack of slice triplets")
        self.net.eval()
        out = []
        for i in range(0, len(triplets), batch_size):
            x, h, w = self._padded(self._prep(triplets[i:i + batch_size]))
            out.append(torch.sigmoid(self.net(x))[:, :h, :w].numpy())
        return np.concatenate(out) if out else np.zeros((0,) + triplets.shape[2:], np.float32)

    def predict(self, triplet: np.ndarray) -> np.ndarray:
        return self.predict_batch(np.asarray(triplet)[None])[0]

    def fit(self, triplets: Sequence[np.ndarray], labels: Sequence[np.ndarray],
            aug: AugmentParams = None, epochs: int = None) -> List[float]:
        """Train with BCE (positive-class weighted) and Adam; returns per-epoch mean loss."""
        if len(triplets) == 0 or len(triplets) != len(labels):
            raise ValueError("need matching, non-empty triplet and label lists")
        aug = aug if aug is not None else AugmentParams.roi()
        epochs = self.cfg.epochs if epochs is None else epochs
        opt = torch.optim.Adam(self.net.parameters(), lr=self.cfg.learning_rate)
        loss_fn = nn.BCEWithLogitsLoss(pos_weight=torch.tensor(self.cfg.pos_weight))
        trace = []
        n = len(triplets)
        for epoch in range(epochs):
            order = np.random.default_rng([self.cfg.seed, epoch, 7]).permutation(n)
            self.net.train()
            total = 0.0
            for start in range(0, n, self.cfg.batch_size):
                idx = order[start:start + self.cfg.batch_size]
                xs, ys = [], []
                for i in idx:
                    rng = np.random.default_rng([self.cfg.seed, epoch, 8, int(i)])
                    stack = np.concatenate([
                        normalize_hu(np.asarray(triplets[i], float), HU_WINDOW),
                        np.asarray(labels[i], float)[None],
                    ])
                    stack = self._crop(stack, rng)
                    stack = augment_image(stack, aug, rng)
                    xs.append(stack[:3])
                    ys.append(stack[3] >= 0.5)
                x = torch.from_numpy(np.stack(xs).astype(np.float32))
                y = torch.from_numpy(np.stack(ys).astype(np.float32))
                x, h, w = self._padded(x)
                opt.zero_grad()
                loss = loss_fn(self.net(x)[:, :h, :w], y)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            trace.append(total / n)
        self.net.eval()
        self.trained = True
        return trace

    def save(self, prefix) -> None:
        save_weights(prefix, self.net, {"kind": "voxel_unet", "config": asdict(self.cfg)})

    @classmethod
    def load(cls, prefix) -> "UNetVoxelClassifier":
        meta = read_weights_manifest(prefix)
        clf = cls(UNetConfig(**meta["meta"]["config"]))
        load_weights(prefix, clf.net)
        clf.trained = True
        return clf
