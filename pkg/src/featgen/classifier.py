"""Downstream CNN binary classifier over feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import Label
from .feature_store import FeatureMap, Source
from .metrics import per_class_accuracy


@dataclass
class ClassifierConfig:
    conv1_filters: int = 256
    conv2_filters: int = 128
    fc1_width: int = 256
    dropout_p: float = 0.5
    epochs: int = 20
    learning_rate: float = 1e-4
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")


@dataclass
class MixSpec:
    synthetic_count: int = 0

    def __post_init__(self):
        if self.synthetic_count < 0:
            raise ValueError("synthetic_count must be nonnegative")


class FeatureClassifier(nn.Module):
    """Two conv/batch-norm/max-pool blocks, then two FC layers with dropout
    before and after FC1; sigmoid output is P(class = HGG)."""

    def __init__(self, cfg: ClassifierConfig, in_shape=(1024, 15, 15)):
        super().__init__()
        self.cfg = cfg
        c, h, w = in_shape
        self.blocks = nn.Sequential(
            nn.Conv2d(c, cfg.conv1_filters, 3, padding=1),
            nn.BatchNorm2d(cfg.conv1_filters),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(cfg.conv1_filters, cfg.conv2_filters, 3, padding=1),
            nn.BatchNorm2d(cfg.conv2_filters),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )
        flat = cfg.conv2_filters * (h // 4) * (w // 4)
        if flat == 0:
            raise ValueError("input too small for two pooling stages")
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Dropout(cfg.dropout_p),
            nn.Linear(flat, cfg.fc1_width),
            nn.ReLU(inplace=True),
            nn.Dropout(cfg.dropout_p),
            nn.Linear(cfg.fc1_width, 1),
        )

    def forward(self, x):
        return torch.sigmoid(self.head(self.blocks(x))).squeeze(1)


def build_classifier(cfg: ClassifierConfig, in_shape=(1024, 15, 15)) -> FeatureClassifier:
    return FeatureClassifier(cfg, in_shape)


def _hgg_targets(records):
    # sigmoid output is P(HGG), so HGG -> 1.0
    return np.array([1.0 if r.label == Label.HGG else 0.0 for r in records], dtype=np.float32)


def train_classifier(model: FeatureClassifier, real: list[FeatureMap],
                     synthetic: list[FeatureMap], mix: MixSpec,
                     cfg: ClassifierConfig):
    """Train on all real features plus the first mix.synthetic_count
    synthetic ones (store order), shuffled with cfg.seed. Returns curves."""
    if not real:
        raise ValueError("real store must be nonempty")
    if {r.label for r in real} != set(Label):
        raise ValueError("real store must contain both classes")
    if mix.synthetic_count > len(synthetic):
        raise ValueError(f"requested {mix.synthetic_count} synthetic features, "
                         f"only {len(synthetic)} available")
    train_set = list(real) + list(synthetic[:mix.synthetic_count])

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    features = np.stack([r.data for r in train_set])
    targets = _hgg_targets(train_set)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    bce = nn.BCELoss()

    curves = []
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = torch.from_numpy(features[idx])
            y = torch.from_numpy(targets[idx])
            p = model(x)
            loss = bce(p.clamp(1e-7, 1 - 1e-7), y)
            if not torch.isfinite(loss):
                raise RuntimeError(f"classifier diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        curves.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return curves


def predict(model: FeatureClassifier, records: list[FeatureMap],
            batch_size: int = 64) -> list[Label]:
    """Threshold 0.5 on the sigmoid output."""
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(records), batch_size):
            chunk = records[i:i + batch_size]
            x = torch.from_numpy(np.stack([r.data for r in chunk]))
            p = model(x).numpy()
            preds.extend(Label.HGG if v >= 0.5 else Label.LGG for v in p)
    return preds


def evaluate_classifier(model: FeatureClassifier, test: list[FeatureMap]) -> dict:
    """Per-class and total accuracy on a REAL-only test store."""
    if not test:
        raise ValueError("empty test store")
    if any(r.source != Source.REAL for r in test):
        raise ValueError("test store must contain REAL features only")
    preds = predict(model, test)
    result = per_class_accuracy(preds, [r.label for r in test])
    return {
        "per_class": {lbl.name: acc for lbl, acc in result["per_class"].items()},
        "total": result["total"],
    }
