"""U-Net segmenter, soft-dice training loop, and bottleneck feature extraction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .augment import AugmentationConfig, apply as apply_augment, draw as draw_augment
from .data import SliceSample
from .metrics import hard_dice, iou, soft_dice_loss

TAPS = ("enc1", "enc2", "enc3", "enc4", "bottleneck", "dec1", "dec2", "dec3")


@dataclass
class UNetConfig:
    in_channels: int = 4
    base_filters: int = 64
    depth: int = 4
    bottleneck_channels: int = 1024
    input_side: int = 240

    def __post_init__(self):
        if self.input_side % 2**self.depth != 0:
            raise ValueError("input_side must be divisible by 2^depth")
        if self.bottleneck_channels != self.base_filters * 2**self.depth:
            raise ValueError("bottleneck_channels must equal base_filters * 2^depth")


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-5
    batch_size: int = 10
    seed: int = 0
    checkpoint_dir: Path | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """4 encoder blocks with max-pooling, a 1024-channel bottleneck, and 4
    decoder blocks that upsample by transposed convolution and concatenate
    the matching encoder output."""

    def __init__(self, cfg: UNetConfig | None = None):
        super().__init__()
        cfg = cfg or UNetConfig()
        self.cfg = cfg
        b = cfg.base_filters
        widths = [b * 2**i for i in range(cfg.depth)]          # 64,128,256,512
        self.encoders = nn.ModuleList()
        cin = cfg.in_channels
        for w in widths:
            self.encoders.append(_double_conv(cin, w))
            cin = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _double_conv(widths[-1], cfg.bottleneck_channels)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        cin = cfg.bottleneck_channels
        for w in reversed(widths):                              # 512,256,128,64
            self.ups.append(nn.ConvTranspose2d(cin, w, 2, stride=2))
            self.decoders.append(_double_conv(2 * w, w))
            cin = w
        self.head = nn.Conv2d(b, 1, 1)

    def forward_with_taps(self, x):
        taps = {}
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            taps[f"enc{i + 1}"] = x
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        taps["bottleneck"] = x
        for i, (up, dec) in enumerate(zip(self.ups, self.decoders)):
            x = up(x)
            skip = skips[-(i + 1)]
            if x.shape[-2:] != skip.shape[-2:]:
                raise RuntimeError(f"skip/upsample spatial mismatch at decoder {i + 1}: "
                                   f"{tuple(x.shape[-2:])} vs {tuple(skip.shape[-2:])}")
            x = dec(torch.cat([skip, x], dim=1))
            if i < len(self.ups) - 1:
                taps[f"dec{i + 1}"] = x
        taps["out"] = torch.sigmoid(self.head(x))
        return taps

    def forward(self, x):
        return self.forward_with_taps(x)["out"]


def adapt_channels(images: np.ndarray, in_channels: int) -> torch.Tensor:
    """(N, H, W) or (N, 1, H, W) float images -> (N, in_channels, H, W) tensor
    by replicating the single channel."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.shape[1] == 1 and in_channels > 1:
        arr = np.repeat(arr, in_channels, axis=1)
    elif arr.shape[1] != in_channels:
        raise ValueError(f"cannot adapt {arr.shape[1]} channels to {in_channels}")
    return torch.from_numpy(arr)


def _batch_tensors(slices: list[SliceSample], in_channels: int):
    images = adapt_channels(np.stack([s.image for s in slices]), in_channels)
    masks = torch.from_numpy(np.stack([s.mask for s in slices]).astype(np.float32))[:, None]
    return images, masks


def evaluate_segmentation(model: UNet, slices: list[SliceSample], batch_size: int = 10) -> dict:
    """Mean per-slice soft-dice loss, hard dice and IoU at threshold 0.5."""
    if not slices:
        raise ValueError("empty input")
    model.eval()
    losses, dices, ious = [], [], []
    with torch.no_grad():
        for i in range(0, len(slices), batch_size):
            chunk = slices[i:i + batch_size]
            images, masks = _batch_tensors(chunk, model.cfg.in_channels)
            preds = model(images)
            for j in range(len(chunk)):
                p, t = preds[j, 0], masks[j, 0]
                losses.append(float(soft_dice_loss(p, t)))
                pm = (p.numpy() >= 0.5).astype(np.uint8)
                tm = t.numpy().astype(np.uint8)
                dices.append(hard_dice(pm, tm))
                ious.append(iou(pm, tm))
    return {"soft_dice_loss": float(np.mean(losses)),
            "hard_dice": float(np.mean(dices)),
            "iou": float(np.mean(ious))}


def extract_features(model: UNet, slices: list[SliceSample], tap: str = "bottleneck",
                     batch_size: int = 10):
    """Activations at the named tap for each slice; gradients not tracked.

    Returns (features, labels, parent_ids) with features (N, c, h, w) float32.
    """
    if tap not in TAPS:
        raise ValueError(f"unknown tap {tap!r}; expected one of {TAPS}")
    model.eval()
    feats, labels, pids = [], [], []
    with torch.no_grad():
        for i in range(0, len(slices), batch_size):
            chunk = slices[i:i + batch_size]
            images, _ = _batch_tensors(chunk, model.cfg.in_channels)
            taps = model.forward_with_taps(images)
            feats.append(taps[tap].numpy().astype(np.float32))
            labels.extend(s.label for s in chunk)
            pids.extend(s.parent_id for s in chunk)
    return np.concatenate(feats, axis=0), labels, pids


def save_checkpoint(model: UNet, path: Path, meta: dict):
    path = Path(path)
    torch.save(model.state_dict(), path)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_checkpoint(path: Path, cfg: UNetConfig) -> UNet:
    model = UNet(cfg)
    model.load_state_dict(torch.load(path, weights_only=True))
    return model


def train_segmentation(model: UNet, train_slices: list[SliceSample],
                       val_slices: list[SliceSample], tc: TrainConfig,
                       ac: AugmentationConfig | None = None):
    """Adam + soft-dice training; augmentation only on training batches.

    Returns (history, best_epoch). One history row per epoch with train and
    val metrics; checkpoints per epoch when tc.checkpoint_dir is set, with
    "best" = epoch maximizing validation IoU copied to best.pt.
    """
    if not train_slices or not val_slices:
        raise ValueError("train and val sets must be nonempty")
    torch.manual_seed(tc.seed)
    rng = np.random.default_rng(tc.seed)
    opt = torch.optim.Adam(model.parameters(), lr=tc.learning_rate)
    ckpt_dir = Path(tc.checkpoint_dir) if tc.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    history = []
    best_iou, best_epoch = -1.0, -1
    for epoch in range(tc.epochs):
        model.train()
        order = rng.permutation(len(train_slices))
        for start in range(0, len(order), tc.batch_size):
            batch = [train_slices[k] for k in order[start:start + tc.batch_size]]
            if ac is not None:
                augmented = []
                for s in batch:
                    d = draw_augment(ac, int(rng.integers(0, 2**31 - 1)))
                    img, msk = apply_augment(s.image, s.mask, d)
                    augmented.append(SliceSample(img, msk, s.label, s.parent_id))
                batch = augmented
            images, masks = _batch_tensors(batch, model.cfg.in_channels)
            preds = model(images)
            loss = soft_dice_loss(preds, masks)
            if not torch.isfinite(loss):
                raise RuntimeError(f"training diverged at epoch {epoch}: loss={loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()

        row = {"epoch": epoch}
        row.update({f"train_{k}": v for k, v in evaluate_segmentation(model, train_slices).items()})
        row.update({f"val_{k}": v for k, v in evaluate_segmentation(model, val_slices).items()})
        history.append(row)
        if ckpt_dir:
            save_checkpoint(model, ckpt_dir / f"epoch_{epoch:03d}.pt",
                            {"epoch": epoch, "val_iou": row["val_iou"]})
        if row["val_iou"] > best_iou:
            best_iou, best_epoch = row["val_iou"], epoch
            if ckpt_dir:
                save_checkpoint(model, ckpt_dir / "best.pt",
                                {"epoch": epoch, "val_iou": row["val_iou"]})
    return history, best_epoch
