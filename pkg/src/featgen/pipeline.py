"""End-to-end orchestration: phantoms -> split -> U-Net -> features -> AC-GAN
-> generate/filter -> classifier sweep -> report.

Stages are content-addressed: each stage hashes the config sections it
depends on plus its upstream hashes, and is skipped when its artifacts
already exist with a matching hash.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import acgan, classifier as clf, data, feature_store as fs, unet
from .augment import AugmentationConfig
from .data import Label, NormStats, SliceSample, SplitSpec


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


@dataclass
class DataSection:
    n_hgg: int = 40
    n_lgg: int = 26
    channels: int = 8
    side: int = 240
    seed: int = 1
    train_fraction: float = 0.9


@dataclass
class UnetSection:
    in_channels: int = 4
    base_filters: int = 64
    epochs: int = 30
    learning_rate: float = 1e-5
    batch_size: int = 10
    seed: int = 0
    tap: str = "bottleneck"
    augment: bool = True


@dataclass
class GenerateSection:
    n: int = 4800
    seed: int = 7
    class_mix: dict | None = None  # None = balanced


@dataclass
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    unet: UnetSection = field(default_factory=UnetSection)
    gan: acgan.GanConfig = field(default_factory=acgan.GanConfig)
    generate: GenerateSection = field(default_factory=GenerateSection)
    classifier: clf.ClassifierConfig = field(default_factory=clf.ClassifierConfig)
    sweep: list = field(default_factory=lambda: [0, 200, 400])
    output_dir: str = "runs/featgen"
    strict_determinism: bool = False

    def __post_init__(self):
        if any(s < 0 for s in self.sweep):
            raise ConfigError("sweep values must be nonnegative")
        if sorted(self.sweep) != list(self.sweep):
            raise ConfigError("sweep values must be sorted")


_SECTIONS = {
    "data": DataSection,
    "augment": AugmentationConfig,
    "unet": UnetSection,
    "gan": acgan.GanConfig,
    "generate": GenerateSection,
    "classifier": clf.ClassifierConfig,
}


def load_config(path) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> PipelineConfig:
    kwargs = {}
    known = set(_SECTIONS) | {"sweep", "output_dir", "strict_determinism"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        for name, cls in _SECTIONS.items():
            section = raw.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section '{name}' must be an object")
            fields = {f.name for f in cls.__dataclass_fields__.values()}
            bad = set(section) - fields
            if bad:
                raise ConfigError(f"unknown keys in '{name}': {sorted(bad)}")
            if name == "gan" and "betas" in section:
                section = dict(section, betas=tuple(section["betas"]))
            kwargs[name] = cls(**section)
        return PipelineConfig(
            sweep=list(raw.get("sweep", [0, 200, 400])),
            output_dir=str(raw.get("output_dir", "runs/featgen")),
            strict_determinism=bool(raw.get("strict_determinism", False)),
            **kwargs,
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def _section_json(obj) -> str:
    return json.dumps(asdict(obj), sort_keys=True)


def _hash(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8"))
    return h.hexdigest()[:16]


def _write_csv(path, rows, fieldnames):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _apply_strict_determinism():
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


class PipelineRun:
    """Stateful view of one output directory; stages skip when up to date."""

    STAGES = ("prepare", "finetune", "extract", "gan", "generate", "filter", "sweep", "report")

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        if cfg.strict_determinism:
            _apply_strict_determinism()
        self.hashes = {}

    def _dir(self, stage) -> Path:
        d = self.root / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _up_to_date(self, stage, stage_hash) -> bool:
        meta = self.root / stage / "stage.json"
        if not meta.exists():
            return False
        try:
            recorded = json.loads(meta.read_text())
        except json.JSONDecodeError:
            return False
        if recorded.get("hash") != stage_hash:
            return False
        return all((self.root / p).exists() for p in recorded.get("outputs", []))

    def _finish(self, stage, stage_hash, outputs):
        (self.root / stage / "stage.json").write_text(json.dumps(
            {"hash": stage_hash, "outputs": outputs}, indent=2, sort_keys=True))

    def _run_stage(self, stage, stage_hash, fn):
        self.hashes[stage] = stage_hash
        self._dir(stage)
        if self._up_to_date(stage, stage_hash):
            return False
        try:
            outputs = fn()
        except (ConfigError, StageError):
            raise
        except Exception as e:
            raise StageError(stage, str(e)) from e
        self._finish(stage, stage_hash, outputs)
        return True

    # ------------------------------------------------------------- prepare

    def prepare(self):
        h = _hash("prepare", _section_json(self.cfg.data))
        return self._run_stage("prepare", h, self._do_prepare)

    def _do_prepare(self):
        d = self.cfg.data
        out = self._dir("prepare")
        vol_dir = out / "volumes"
        vol_dir.mkdir(exist_ok=True)
        volumes = []
        for i in range(d.n_hgg):
            volumes.append(data.generate_phantom(Label.HGG, d.channels, d.seed + i, side=d.side))
        for i in range(d.n_lgg):
            volumes.append(data.generate_phantom(Label.LGG, d.channels, d.seed + i, side=d.side))
        outputs = []
        for v in volumes:
            path = vol_dir / f"{v.id}.fgen"
            fs.write_store(path, [
                fs.FeatureMap(v.voxels, v.label, fs.Source.REAL, v.id),
                fs.FeatureMap(v.masks.astype(np.float32), v.label, fs.Source.REAL, v.id),
            ])
            outputs.append(str(path.relative_to(self.root)))

        spec = SplitSpec(train_fraction=d.train_fraction, seed=d.seed)
        train, test = data.stratified_split(volumes, spec)
        train_slices = [s for v in train for s in data.extract_slices(v)]
        stats = data.fit_normalizer(train_slices)

        manifest = {
            "volumes": [{"id": v.id, "label": v.label.name, "channels": v.channels,
                         "path": f"volumes/{v.id}.fgen"} for v in volumes],
            "norm": {"mean": stats.mean, "std": stats.std},
            "split": {"train_fraction": d.train_fraction, "seed": d.seed,
                      "train_ids": [v.id for v in train],
                      "test_ids": [v.id for v in test]},
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        outputs.append("prepare/manifest.json")
        return outputs

    def _load_slices(self, which: str, normalized=True) -> list[SliceSample]:
        manifest = json.loads((self._dir("prepare") / "manifest.json").read_text())
        ids = set(manifest["split"][f"{which}_ids"])
        slices = []
        for entry in manifest["volumes"]:
            if entry["id"] not in ids:
                continue
            records = fs.read_store(self.root / "prepare" / entry["path"])
            vol = data.VolumeSample(id=entry["id"], voxels=records[0].data,
                                    masks=records[1].data.astype(np.uint8),
                                    label=Label[entry["label"]])
            slices.extend(data.extract_slices(vol))
        if normalized:
            stats = NormStats(**manifest["norm"])
            slices = data.apply_normalizer(slices, stats)
        return slices

    # ------------------------------------------------------------ finetune

    def finetune(self):
        self.prepare()
        h = _hash("finetune", self.hashes["prepare"],
                  _section_json(self.cfg.augment), _section_json(self.cfg.unet))
        return self._run_stage("finetune", h, self._do_finetune)

    def _unet_config(self) -> unet.UNetConfig:
        u = self.cfg.unet
        return unet.UNetConfig(
            in_channels=u.in_channels, base_filters=u.base_filters,
            bottleneck_channels=u.base_filters * 16, input_side=self.cfg.data.side)

    def _do_finetune(self):
        u = self.cfg.unet
        out = self._dir("finetune")
        train = self._load_slices("train")
        val = self._load_slices("test")
        torch.manual_seed(u.seed)  # weight init; the train loop re-seeds itself
        model = unet.UNet(self._unet_config())
        tc = unet.TrainConfig(epochs=u.epochs, learning_rate=u.learning_rate,
                              batch_size=u.batch_size, seed=u.seed,
                              checkpoint_dir=out / "checkpoints")
        ac = self.cfg.augment if u.augment else None
        history, best_epoch = unet.train_segmentation(model, train, val, tc, ac)
        _write_csv(out / "history.csv", history, list(history[0].keys()))
        (out / "best_epoch.json").write_text(json.dumps({"best_epoch": best_epoch}))
        return ["finetune/history.csv", "finetune/checkpoints/best.pt", "finetune/best_epoch.json"]

    # ------------------------------------------------------------- extract

    def extract(self):
        self.finetune()
        h = _hash("extract", self.hashes["finetune"], self.cfg.unet.tap)
        return self._run_stage("extract", h, self._do_extract)

    def _extract_one(self, model, slices, path):
        feats, labels, pids = unet.extract_features(model, slices, tap=self.cfg.unet.tap)
        records = [fs.FeatureMap(feats[i], labels[i], fs.Source.REAL, pids[i])
                   for i in range(len(labels))]
        fs.write_store(path, records)

    def _do_extract(self):
        out = self._dir("extract")
        model = unet.load_checkpoint(self.root / "finetune" / "checkpoints" / "best.pt",
                                     self._unet_config())
        self._extract_one(model, self._load_slices("train"), out / "features_train.fgen")
        self._extract_one(model, self._load_slices("test"), out / "features_test.fgen")
        return ["extract/features_train.fgen", "extract/features_test.fgen"]

    # ----------------------------------------------------------------- gan

    def gan(self):
        self.extract()
        h = _hash("gan", self.hashes["extract"], _section_json(self.cfg.gan))
        return self._run_stage("gan", h, self._do_gan)

    def _do_gan(self):
        out = self._dir("gan")
        records = fs.read_store(self.root / "extract" / "features_train.fgen")
        G, D, curves = acgan.train_acgan(records, self.cfg.gan)
        torch.save(G.state_dict(), out / "G.pt")
        torch.save(D.state_dict(), out / "D.pt")
        (out / "shapes.json").write_text(json.dumps({"out_shape": list(records[0].data.shape)}))
        _write_csv(out / "curves.csv", curves, list(curves[0].keys()))
        return ["gan/G.pt", "gan/D.pt", "gan/curves.csv", "gan/shapes.json"]

    def _feature_shape(self):
        return tuple(json.loads((self.root / "gan" / "shapes.json").read_text())["out_shape"])

    def _load_generator(self) -> acgan.Generator:
        G = acgan.Generator(self.cfg.gan, out_shape=self._feature_shape())
        G.load_state_dict(torch.load(self.root / "gan" / "G.pt", weights_only=True))
        return G

    def _load_discriminator(self) -> acgan.Discriminator:
        D = acgan.Discriminator(self.cfg.gan, in_channels=self._feature_shape()[0])
        D.load_state_dict(torch.load(self.root / "gan" / "D.pt", weights_only=True))
        return D

    # ------------------------------------------------------------ generate

    def generate(self):
        self.gan()
        h = _hash("generate", self.hashes["gan"], _section_json(self.cfg.generate))
        return self._run_stage("generate", h, self._do_generate)

    def _class_mix(self) -> dict:
        g = self.cfg.generate
        if g.class_mix is not None:
            return {int(Label[k]) if isinstance(k, str) else int(k): v
                    for k, v in g.class_mix.items()}
        return {int(Label.HGG): g.n // 2, int(Label.LGG): g.n - g.n // 2}

    def _do_generate(self):
        out = self._dir("generate")
        G = self._load_generator()
        records = acgan.generate_features(G, self.cfg.generate.n, self._class_mix(),
                                          self.cfg.generate.seed)
        fs.write_store(out / "synthetic.fgen", records)
        return ["generate/synthetic.fgen"]

    # -------------------------------------------------------------- filter

    def filter(self):
        self.generate()
        h = _hash("filter", self.hashes["generate"])
        return self._run_stage("filter", h, self._do_filter)

    def _do_filter(self):
        out = self._dir("filter")
        D = self._load_discriminator()
        synthetic = fs.read_store(self.root / "generate" / "synthetic.fgen")
        kept = acgan.filter_by_discriminator(D, synthetic)
        fs.write_store(out / "kept.fgen", kept)
        return ["filter/kept.fgen"]

    # --------------------------------------------------------------- sweep

    def sweep(self):
        self.filter()
        h = _hash("sweep", self.hashes["filter"], self.hashes["extract"],
                  _section_json(self.cfg.classifier), json.dumps(self.cfg.sweep))
        return self._run_stage("sweep", h, self._do_sweep)

    def classify(self, synthetic_count: int) -> dict:
        """One classifier run at a fixed mix; returns the result row."""
        real = fs.read_store(self.root / "extract" / "features_train.fgen")
        kept = fs.read_store(self.root / "filter" / "kept.fgen") if synthetic_count else []
        test = fs.read_store(self.root / "extract" / "features_test.fgen")
        torch.manual_seed(self.cfg.classifier.seed)  # weight init
        model = clf.build_classifier(self.cfg.classifier, in_shape=real[0].data.shape)
        try:
            clf.train_classifier(model, real, kept, clf.MixSpec(synthetic_count),
                                 self.cfg.classifier)
        except ValueError as e:
            raise StageError("classify", str(e)) from e
        result = clf.evaluate_classifier(model, test)
        return {
            "synthetic_count": synthetic_count,
            "hgg_accuracy": result["per_class"].get("HGG"),
            "lgg_accuracy": result["per_class"].get("LGG"),
            "total_accuracy": result["total"],
        }

    def _do_sweep(self):
        out = self._dir("sweep")
        if not self.cfg.sweep:
            raise ConfigError("sweep must be nonempty")
        rows = [self.classify(s) for s in self.cfg.sweep]
        _write_csv(out / "sweep.csv", rows, list(rows[0].keys()))
        (out / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
        return ["sweep/sweep.csv", "sweep/sweep.json"]

    # -------------------------------------------------------------- report

    def report(self):
        self.sweep()
        h = _hash("report", self.hashes["sweep"])
        self._run_stage("report", h, self._do_report)
        return json.loads((self.root / "report" / "report.json").read_text())

    def _majority_floor(self) -> float:
        """Total accuracy of a constant majority-class predictor on the test set."""
        test = fs.read_store(self.root / "extract" / "features_test.fgen")
        counts = [sum(1 for r in test if r.label == lbl) for lbl in Label]
        return max(counts) / len(test)

    def _do_report(self):
        out = self._dir("report")
        rows = json.loads((self.root / "sweep" / "sweep.json").read_text())
        floor = self._majority_floor()
        eligible = [r for r in rows if r["total_accuracy"] >= floor] or rows
        best = max(eligible, key=lambda r: (r["lgg_accuracy"] or 0.0, r["total_accuracy"]))
        report = {
            "rows": rows,
            "best": best,
            "majority_floor": floor,
            "artifacts": {
                "manifest": "prepare/manifest.json",
                "unet_history": "finetune/history.csv",
                "unet_best": "finetune/checkpoints/best.pt",
                "features_train": "extract/features_train.fgen",
                "features_test": "extract/features_test.fgen",
                "gan_curves": "gan/curves.csv",
                "synthetic": "generate/synthetic.fgen",
                "kept": "filter/kept.fgen",
                "sweep": "sweep/sweep.csv",
            },
        }
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        render_report(self.root)
        return ["report/report.json"]


def run_pipeline(config_path) -> dict:
    """Execute every stage in order; returns the RunReport dict."""
    cfg = load_config(config_path)
    return PipelineRun(cfg).report()


def render_report(run_dir) -> list[str]:
    """Render curve plots and the per-class accuracy bar chart."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    out = run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []

    history_csv = run_dir / "finetune" / "history.csv"
    if not history_csv.exists():
        raise FileNotFoundError(f"missing curves CSV: {history_csv}")
    history = _read_csv(history_csv)
    epochs = [int(r["epoch"]) for r in history]
    val_iou = [float(r["val_iou"]) for r in history]
    best_epoch = epochs[int(np.argmax(val_iou))]
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for key in ("train_soft_dice_loss", "val_soft_dice_loss"):
        axes[0].plot(epochs, [float(r[key]) for r in history], label=key)
    axes[0].axvline(best_epoch, color="black")
    axes[0].set_xlabel("epoch"), axes[0].set_title("segmentation loss"), axes[0].legend()
    for key in ("train_hard_dice", "val_hard_dice", "train_iou", "val_iou"):
        axes[1].plot(epochs, [float(r[key]) for r in history], label=key)
    axes[1].axvline(best_epoch, color="black")
    axes[1].set_xlabel("epoch"), axes[1].set_title("segmentation metrics"), axes[1].legend()
    fig.tight_layout()
    fig.savefig(out / "unet_curves.png")
    plt.close(fig)
    written.append("report/unet_curves.png")

    gan_csv = run_dir / "gan" / "curves.csv"
    if not gan_csv.exists():
        raise FileNotFoundError(f"missing curves CSV: {gan_csv}")
    curves = _read_csv(gan_csv)
    epochs = [int(r["epoch"]) for r in curves]
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for key in ("d_loss_source", "d_loss_class", "g_loss_source", "g_loss_class"):
        axes[0].plot(epochs, [float(r[key]) for r in curves], label=key)
    axes[0].set_title("GAN training loss"), axes[0].legend()
    axes[1].plot(epochs, [float(r["d_class_accuracy"]) for r in curves])
    axes[1].set_title("discriminator class accuracy"), axes[1].set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(out / "gan_curves.png")
    plt.close(fig)
    written.append("report/gan_curves.png")

    sweep_csv = run_dir / "sweep" / "sweep.csv"
    if not sweep_csv.exists():
        raise FileNotFoundError(f"missing curves CSV: {sweep_csv}")
    rows = _read_csv(sweep_csv)
    if not rows:
        raise ValueError("sweep CSV is empty")
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.27
    for i, key in enumerate(("hgg_accuracy", "lgg_accuracy", "total_accuracy")):
        ax.bar(x + (i - 1) * width, [float(r[key]) for r in rows], width, label=key)
    ax.set_xticks(x, [r["synthetic_count"] for r in rows])
    ax.set_xlabel("synthetic features added")
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "accuracy_bars.png")
    plt.close(fig)
    written.append("report/accuracy_bars.png")
    return written
