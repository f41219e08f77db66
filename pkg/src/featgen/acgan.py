"""Class-conditional feature generator and dual-head discriminator.

The discriminator maximizes L_S + L_C (source BCE + class NLL on real and
fake batches); the generator maximizes L_C - L_S, implemented as the usual
nonsaturating form: make fakes look real AND be classified as their
conditioning label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import Label
from .feature_store import FeatureMap, Source


@dataclass
class GanConfig:
    nz: int = 100
    ngf: int = 64
    ndf: int = 64
    num_classes: int = 2
    learning_rate: float = 0.002
    batch_size: int = 16
    epochs: int = 50
    leaky_slope: float = 0.2
    seed: int = 0
    betas: tuple = (0.5, 0.999)

    def __post_init__(self):
        if self.nz < 1:
            raise ValueError("nz must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


@dataclass
class GanStepReport:
    d_loss_source: float
    d_loss_class: float
    g_loss_source: float
    g_loss_class: float
    d_class_accuracy: float


def _size_chain(target: int) -> list[int]:
    """Spatial sizes for the 3 generator hidden layers, ending at target.

    Built by repeated ceil-halving so each step is "roughly double", which a
    stride-2 transposed conv can hit exactly (kernel 4 doubles, kernel 3
    gives 2n-1).
    """
    sizes = [target]
    for _ in range(2):
        sizes.append(max(1, (sizes[-1] + 1) // 2))
    return sizes[::-1]


def _upsample_layer(cin, cout, s_in, s_out):
    if s_out == 2 * s_in:
        return nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)
    if s_out == 2 * s_in - 1:
        return nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1)
    raise ValueError(f"cannot upsample {s_in} -> {s_out} in one stride-2 step")


class Generator(nn.Module):
    """(noise z, one-hot class) -> feature map; 3 hidden transposed-conv
    layers with leaky ReLU, linear output (features are unbounded).

    Outputs are produced in standardized space and shifted back to feature
    scale with per-channel statistics stored as buffers.
    """

    def __init__(self, cfg: GanConfig, out_shape=(1024, 15, 15)):
        super().__init__()
        self.cfg = cfg
        self.out_shape = tuple(out_shape)
        c, h, w = self.out_shape
        if h != w:
            raise ValueError("only square feature maps are supported")
        sizes = _size_chain(h)
        g = cfg.ngf
        self.net = nn.Sequential(
            nn.ConvTranspose2d(cfg.nz + cfg.num_classes, g * 4, sizes[0]),
            nn.LeakyReLU(cfg.leaky_slope, inplace=True),
            _upsample_layer(g * 4, g * 2, sizes[0], sizes[1]),
            nn.LeakyReLU(cfg.leaky_slope, inplace=True),
            _upsample_layer(g * 2, g, sizes[1], sizes[2]),
            nn.LeakyReLU(cfg.leaky_slope, inplace=True),
            nn.Conv2d(g, c, 3, padding=1),
        )
        self.register_buffer("out_mean", torch.zeros(c, 1, 1))
        self.register_buffer("out_std", torch.ones(c, 1, 1))

    def set_feature_stats(self, mean: np.ndarray, std: np.ndarray):
        self.out_mean.copy_(torch.as_tensor(mean, dtype=torch.float32).view(-1, 1, 1))
        self.out_std.copy_(torch.as_tensor(std, dtype=torch.float32).view(-1, 1, 1))

    def forward(self, z: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        onehot = F.one_hot(labels.long(), self.cfg.num_classes).float()
        x = torch.cat([z, onehot], dim=1)[:, :, None, None]
        return self.net(x) * self.out_std + self.out_mean


class Discriminator(nn.Module):
    """Feature map -> (P(source=real), class log-probabilities).

    Inputs are standardized per channel with stored statistics so the convs
    see unit-scale data regardless of the feature distribution.
    """

    def __init__(self, cfg: GanConfig, in_channels: int = 1024):
        super().__init__()
        self.cfg = cfg
        d = cfg.ndf
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, d, 3, stride=2, padding=1),
            nn.LeakyReLU(cfg.leaky_slope, inplace=True),
            nn.Conv2d(d, d * 2, 3, stride=2, padding=1),
            nn.LeakyReLU(cfg.leaky_slope, inplace=True),
            nn.Conv2d(d * 2, d * 4, 3, stride=2, padding=1),
            nn.LeakyReLU(cfg.leaky_slope, inplace=True),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.source_head = nn.Linear(d * 4, 1)
        self.class_head = nn.Linear(d * 4, cfg.num_classes)
        self.register_buffer("in_mean", torch.zeros(in_channels, 1, 1))
        self.register_buffer("in_std", torch.ones(in_channels, 1, 1))

    def set_feature_stats(self, mean: np.ndarray, std: np.ndarray):
        self.in_mean.copy_(torch.as_tensor(mean, dtype=torch.float32).view(-1, 1, 1))
        self.in_std.copy_(torch.as_tensor(std, dtype=torch.float32).view(-1, 1, 1))

    def forward(self, x: torch.Tensor):
        h = self.features((x - self.in_mean) / self.in_std)
        source = torch.sigmoid(self.source_head(h)).squeeze(1)
        class_logp = F.log_softmax(self.class_head(h), dim=1)
        return source, class_logp


def build_generator(cfg: GanConfig, out_shape=(1024, 15, 15)) -> Generator:
    return Generator(cfg, out_shape)


def build_discriminator(cfg: GanConfig, in_channels: int = 1024) -> Discriminator:
    return Discriminator(cfg, in_channels)


def feature_stats(features: np.ndarray):
    """Per-channel mean/std over a (N, c, h, w) array; std floored at 1e-6."""
    mean = features.mean(axis=(0, 2, 3))
    std = np.maximum(features.std(axis=(0, 2, 3)), 1e-6)
    return mean, std


_EPS = 1e-8


def gan_train_step(G: Generator, D: Discriminator, opt_g, opt_d,
                   real: torch.Tensor, labels: torch.Tensor,
                   cfg: GanConfig) -> GanStepReport:
    """One discriminator update then one generator update on a real batch."""
    n = real.shape[0]
    if n < 1:
        raise ValueError("batch must be nonempty")

    # discriminator: source BCE on real+fake, class NLL on real+fake
    z = torch.randn(n, cfg.nz)
    fake_labels = torch.randint(0, cfg.num_classes, (n,))
    fake = G(z, fake_labels).detach()
    src_real, cls_real = D(real)
    src_fake, cls_fake = D(fake)
    d_loss_source = -(torch.log(src_real + _EPS).mean()
                      + torch.log(1 - src_fake + _EPS).mean())
    d_loss_class = (F.nll_loss(cls_real, labels.long())
                    + F.nll_loss(cls_fake, fake_labels.long()))
    d_loss = d_loss_source + d_loss_class
    if not torch.isfinite(d_loss):
        raise RuntimeError("discriminator loss is non-finite")
    opt_d.zero_grad()
    d_loss.backward()
    opt_d.step()

    # generator: fakes should look real and carry their conditioning class
    z = torch.randn(n, cfg.nz)
    gen_labels = torch.randint(0, cfg.num_classes, (n,))
    fake = G(z, gen_labels)
    src_fake, cls_fake = D(fake)
    g_loss_source = -torch.log(src_fake + _EPS).mean()
    g_loss_class = F.nll_loss(cls_fake, gen_labels.long())
    g_loss = g_loss_source + g_loss_class
    if not torch.isfinite(g_loss):
        raise RuntimeError("generator loss is non-finite")
    opt_g.zero_grad()
    g_loss.backward()
    opt_g.step()

    with torch.no_grad():
        acc = float((D(real)[1].argmax(dim=1) == labels.long()).float().mean())
    return GanStepReport(float(d_loss_source.detach()), float(d_loss_class.detach()),
                         float(g_loss_source.detach()), float(g_loss_class.detach()), acc)


def train_acgan(records: list[FeatureMap], cfg: GanConfig, checkpoint_dir=None):
    """Train on a real feature store; returns (G, D, curves).

    Curves: one dict per epoch with mean step losses and the discriminator's
    class accuracy on real samples.
    """
    labels_all = {r.label for r in records}
    if len(labels_all) < cfg.num_classes:
        raise ValueError("store must contain every class")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    features = np.stack([r.data for r in records])
    labels = np.array([int(r.label) for r in records], dtype=np.int64)
    mean, std = feature_stats(features)

    G = Generator(cfg, out_shape=features.shape[1:])
    D = Discriminator(cfg, in_channels=features.shape[1])
    G.set_feature_stats(mean, std)
    D.set_feature_stats(mean, std)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.learning_rate, betas=cfg.betas)

    curves = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(records))
        reports = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            real = torch.from_numpy(features[idx])
            lbl = torch.from_numpy(labels[idx])
            reports.append(gan_train_step(G, D, opt_g, opt_d, real, lbl, cfg))
        curves.append({
            "epoch": epoch,
            "d_loss_source": float(np.mean([r.d_loss_source for r in reports])),
            "d_loss_class": float(np.mean([r.d_loss_class for r in reports])),
            "g_loss_source": float(np.mean([r.g_loss_source for r in reports])),
            "g_loss_class": float(np.mean([r.g_loss_class for r in reports])),
            "d_class_accuracy": float(np.mean([r.d_class_accuracy for r in reports])),
        })
        if checkpoint_dir is not None:
            from pathlib import Path
            ckpt = Path(checkpoint_dir)
            ckpt.mkdir(parents=True, exist_ok=True)
            torch.save(G.state_dict(), ckpt / f"G_epoch_{epoch:03d}.pt")
            torch.save(D.state_dict(), ckpt / f"D_epoch_{epoch:03d}.pt")
    return G, D, curves


def generate_features(G: Generator, n: int, class_mix: dict, seed: int) -> list[FeatureMap]:
    """Synthesize n labeled feature maps; deterministic per seed."""
    if n != sum(class_mix.values()):
        raise ValueError("n must equal the sum of class_mix counts")
    gen = torch.Generator().manual_seed(seed)
    out = []
    G.eval()
    with torch.no_grad():
        for label, count in sorted(class_mix.items(), key=lambda kv: int(kv[0])):
            done = 0
            while done < count:
                m = min(64, count - done)
                z = torch.randn(m, G.cfg.nz, generator=gen)
                lbl = torch.full((m,), int(label), dtype=torch.long)
                feats = G(z, lbl).numpy().astype(np.float32)
                for j in range(m):
                    out.append(FeatureMap(data=feats[j], label=Label(int(label)),
                                          source=Source.SYNTHETIC,
                                          parent_id=f"gen-{seed}-{int(label)}-{done + j}"))
                done += m
    return out


def discriminator_class_accuracy(D: Discriminator, records: list[FeatureMap],
                                 batch_size: int = 64) -> float:
    """Fraction of records whose class head agrees with their label."""
    if not records:
        raise ValueError("empty input")
    correct = 0
    D.eval()
    with torch.no_grad():
        for i in range(0, len(records), batch_size):
            chunk = records[i:i + batch_size]
            x = torch.from_numpy(np.stack([r.data for r in chunk]))
            pred = D(x)[1].argmax(dim=1).numpy()
            correct += int(np.sum(pred == np.array([int(r.label) for r in chunk])))
    return correct / len(records)


def filter_by_discriminator(D: Discriminator, synthetic: list[FeatureMap],
                            batch_size: int = 64) -> list[FeatureMap]:
    """Keep features whose predicted class equals their conditioning label;
    order preserved."""
    kept = []
    D.eval()
    with torch.no_grad():
        for i in range(0, len(synthetic), batch_size):
            chunk = synthetic[i:i + batch_size]
            x = torch.from_numpy(np.stack([r.data for r in chunk]))
            pred = D(x)[1].argmax(dim=1).numpy()
            kept.extend(r for r, p in zip(chunk, pred) if p == int(r.label))
    return kept
