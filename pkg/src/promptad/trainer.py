"""Training orchestration: prompt sampling, the paired reconstruction and
restoration streams, the step schedule, logging, and checkpoints.

Randomness is derived per epoch from the run seed, so resuming from an
epoch-boundary checkpoint replays the exact stream a straight run would
have used.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import synthesis
from .errors import ConfigError, DatasetError, NumericError
from .features import BackboneSpec, BUILTIN_KIND, features_for_path, load_image
from .fileio import load_container, save_container
from .losses import CSV_HEADER, LossReport, dice_loss_batch, rec_loss, res_loss, total_loss
from .model import ModelConfig, ReconstructionModel
from .optim import AdamW, clip_grad_norm
from .synthesis import SynthesisParams
from . import tensor as T

PROMPT_MODES = ("random", "fixed")


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 64
    lr: float = 1e-4
    lr_drop_epoch: int = 800
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-4
    lam: float = 0.5
    prompt_mode: str = "random"
    seed: int = 0
    use_restoration: bool = True
    exclude_self_prompt: bool = False
    grad_clip: float = 1.0
    eval_interval: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.epochs > 0 and not (0 <= self.lr_drop_epoch < self.epochs):
            raise ConfigError(f"lr_drop_epoch {self.lr_drop_epoch} must be < epochs {self.epochs}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.lam <= 0.0:
            raise ConfigError("loss weight lam must be > 0")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: the base rate until the drop epoch, then scaled."""
    if epoch < 0 or (config.epochs and epoch >= config.epochs):
        raise ConfigError(f"epoch {epoch} outside schedule of {config.epochs}")
    if epoch >= config.lr_drop_epoch:
        return config.lr * config.lr_drop_factor
    return config.lr


@dataclass
class DatasetIndex:
    """Per-class lists of normal training images plus fixed prompt choices."""
    root: str
    classes: list[str]
    train_paths: dict[str, list[str]]
    fixed_prompt: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.classes:
            raise DatasetError(f"{self.root}: no classes found")
        for cls in self.classes:
            if not self.train_paths.get(cls):
                raise DatasetError(f"{self.root}: class {cls!r} has no training images")
            self.fixed_prompt.setdefault(cls, 0)

    def validate_for_mode(self, mode: str) -> None:
        minimum = 2 if mode == "random" else 1
        for cls in self.classes:
            if len(self.train_paths[cls]) < minimum:
                raise DatasetError(
                    f"class {cls!r} has {len(self.train_paths[cls])} normal images; "
                    f"{mode} prompt mode needs at least {minimum}")


def scan_dataset(root) -> DatasetIndex:
    """Index an MVTec-style layout: <root>/<class>/train/good/*.png."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    classes = sorted(p.name for p in root.iterdir()
                     if p.is_dir() and (p / "train" / "good").is_dir())
    train_paths = {
        cls: sorted(str(p) for p in (root / cls / "train" / "good").iterdir()
                    if p.suffix.lower() == ".png")
        for cls in classes
    }
    return DatasetIndex(str(root), classes, train_paths)


@dataclass
class TestEntry:
    class_id: str
    path: str
    label: int
    mask_path: str | None


def scan_test_split(root) -> list[TestEntry]:
    """Collect <root>/<class>/test/<kind>/*.png with their ground-truth masks."""
    root = Path(root)
    entries: list[TestEntry] = []
    for cls_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        test_dir = cls_dir / "test"
        if not test_dir.is_dir():
            continue
        for kind_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            label = 0 if kind_dir.name == "good" else 1
            for img in sorted(kind_dir.iterdir()):
                if img.suffix.lower() != ".png":
                    continue
                mask_path = None
                if label:
                    cand = cls_dir / "ground_truth" / kind_dir.name / f"{img.stem}_mask.png"
                    if not cand.is_file():
                        raise DatasetError(f"missing mask for anomalous image {img}")
                    mask_path = str(cand)
                entries.append(TestEntry(cls_dir.name, str(img), label, mask_path))
    if not entries:
        raise DatasetError(f"{root}: no test images found")
    return entries


def sample_prompt(index: DatasetIndex, class_id: str, target_id: int,
                  mode: str, rng: np.random.Generator,
                  exclude_self: bool = False) -> int:
    """Pick the prompt image id for one training target."""
    paths = index.train_paths.get(class_id)
    if not paths:
        raise DatasetError(f"class {class_id!r} is empty")
    if mode == "fixed":
        return index.fixed_prompt[class_id]
    if mode != "random":
        raise ConfigError(f"unknown prompt mode {mode!r}")
    if exclude_self and len(paths) > 1:
        pick = int(rng.integers(0, len(paths) - 1))
        return pick + 1 if pick >= target_id else pick
    return int(rng.integers(0, len(paths)))


class LoadedDataset:
    """Training images held in memory, with cross-class texture pools."""

    def __init__(self, index: DatasetIndex):
        self.index = index
        self.images: dict[str, list[np.ndarray]] = {
            cls: [load_image(p) for p in index.train_paths[cls]]
            for cls in index.classes
        }
        self._textures: dict[str, list[np.ndarray]] = {}

    def textures_excluding(self, class_id: str) -> list[np.ndarray]:
        if class_id not in self._textures:
            pool = [img for cls in self.index.classes if cls != class_id
                    for img in self.images[cls]]
            self._textures[class_id] = pool
        return self._textures[class_id]


class Trainer:
    def __init__(self, dataset: LoadedDataset, model: ReconstructionModel,
                 backbone_spec: BackboneSpec, config: TrainConfig,
                 synth_params: SynthesisParams | None = None,
                 synthesize_fn=synthesis.synthesize,
                 eval_fn=None):
        self.dataset = dataset
        self.model = model
        self.backbone_spec = backbone_spec
        self.config = config
        self.synth_params = synth_params or SynthesisParams()
        self.synthesize_fn = synthesize_fn
        self.eval_fn = eval_fn
        self.optimizer = AdamW(model.parameters(), lr=config.lr,
                               weight_decay=config.weight_decay)
        self.loss_rows: list[str] = [CSV_HEADER]
        self.metric_rows: list[str] = ["epoch,i_roc,p_roc,p_pr"]
        self.step_count = 0
        self._needs_anomaly = config.use_restoration or model.cfg.refiner_enabled
        if self._needs_anomaly and backbone_spec.kind != BUILTIN_KIND:
            raise ConfigError("restoration/refiner training synthesizes images and "
                              "therefore needs the builtin backbone, not feature files")
        self._feat_cache: dict[tuple[str, int], np.ndarray] = {}

    # -- features -----------------------------------------------------------

    def _features_of(self, class_id: str, idx: int) -> np.ndarray:
        key = (class_id, idx)
        if key not in self._feat_cache:
            path = self.dataset.index.train_paths[class_id][idx]
            self._feat_cache[key] = features_for_path(path, self.backbone_spec)
        return self._feat_cache[key]

    def _features_of_image(self, image: np.ndarray) -> np.ndarray:
        from .features import extract_features
        return extract_features(image, self.backbone_spec)

    # -- one optimization step ----------------------------------------------

    def train_step(self, entries: list[tuple[str, int]], rng: np.random.Generator,
                   epoch: int = 0) -> LossReport:
        cfg = self.config
        b = len(entries)
        f_n = np.stack([self._features_of(c, i) for c, i in entries])
        prompts = []
        for c, i in entries:
            pid = sample_prompt(self.dataset.index, c, i, cfg.prompt_mode, rng,
                                cfg.exclude_self_prompt)
            prompts.append(self._features_of(c, pid))
        f_p = np.stack(prompts)

        masks = None
        if self._needs_anomaly:
            f_a_list, mask_list = [], []
            for c, i in entries:
                img = self.dataset.images[c][i]
                sample = self.synthesize_fn(img, rng, self.synth_params,
                                            textures=self.dataset.textures_excluding(c),
                                            source_index=i)
                f_a_list.append(self._features_of_image(sample.image))
                mask_list.append(sample.mask)
            f_a = np.stack(f_a_list)
            targets = np.concatenate([f_n, f_a], axis=0)
            prompts_all = np.concatenate([f_p, f_p], axis=0)
            h, w = self.model.image_hw
            masks = np.concatenate([
                np.zeros((b, h, w), dtype=np.float32),
                np.stack(mask_list).astype(np.float32),
            ], axis=0)
        else:
            targets = f_n
            prompts_all = f_p

        self.optimizer.zero_grad()
        fhat, mhat = self.model.forward(targets, prompts_all, training=True, rng=rng)
        fhat_n = T.narrow(fhat, 0, b)
        l_rec = rec_loss(f_n, fhat_n)
        l_res = 0.0
        if cfg.use_restoration:
            l_res = res_loss(f_n, T.narrow(fhat, b, 2 * b))
        l_seg = 0.0
        if mhat is not None:
            l_seg = dice_loss_batch(mhat, masks)
        total = total_loss(l_rec, l_res, l_seg, cfg.lam)
        if not np.isfinite(total.data):
            raise NumericError(
                f"non-finite loss at epoch {epoch} step {self.step_count}: "
                f"rec={float(l_rec.data)} res={float(T.as_tensor(l_res).data)} "
                f"seg={float(T.as_tensor(l_seg).data)} batch={entries}")
        total.backward()
        clip_grad_norm(list(self.model.parameters().values()), cfg.grad_clip)
        self.optimizer.step(lr=lr_at(epoch, cfg) if cfg.epochs else cfg.lr)
        self.step_count += 1
        return LossReport(
            l_rec=float(l_rec.data),
            l_res=float(T.as_tensor(l_res).data),
            l_seg=float(T.as_tensor(l_seg).data),
            total=float(total.data),
            lam=cfg.lam,
        )

    # -- epoch loop -----------------------------------------------------------

    def run(self, start_epoch: int = 0) -> list[LossReport]:
        cfg = self.config
        self.dataset.index.validate_for_mode(cfg.prompt_mode)
        pairs = [(c, i) for c in self.dataset.index.classes
                 for i in range(len(self.dataset.index.train_paths[c]))]
        reports: list[LossReport] = []
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(pairs))
            for lo in range(0, len(order), cfg.batch_size):
                batch = [pairs[j] for j in order[lo:lo + cfg.batch_size]]
                report = self.train_step(batch, rng, epoch)
                reports.append(report)
                self.loss_rows.append(report.csv_row(self.step_count - 1, lr_at(epoch, cfg)))
            if cfg.eval_interval and self.eval_fn and (epoch + 1) % cfg.eval_interval == 0:
                scores = self.eval_fn(self.model)
                self.metric_rows.append(
                    f"{epoch + 1},{scores['i_roc']:.9g},{scores['p_roc']:.9g},{scores['p_pr']:.9g}")
        return reports

    def write_logs(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train_log.csv").write_text("\n".join(self.loss_rows) + "\n")
        if len(self.metric_rows) > 1:
            (out_dir / "metrics_log.csv").write_text("\n".join(self.metric_rows) + "\n")


# -- checkpoints ---------------------------------------------------------------


def _backbone_arrays(spec: BackboneSpec) -> dict[str, np.ndarray]:
    return {
        "backbone/kind": np.array([0.0 if spec.kind == BUILTIN_KIND else 1.0]),
        "backbone/stage_channels": np.array(spec.stage_channels, dtype=np.float32),
        "backbone/fusion": np.array(spec.fusion_size, dtype=np.float32),
        "backbone/seed": np.array([float(spec.seed)]),
    }


def _backbone_from_arrays(blobs) -> BackboneSpec:
    kind = BUILTIN_KIND if float(blobs["backbone/kind"][0]) == 0.0 else "feature-file"
    return BackboneSpec(
        kind=kind,
        stage_channels=tuple(int(round(float(v))) for v in blobs["backbone/stage_channels"]),
        fusion_size=tuple(int(round(float(v))) for v in blobs["backbone/fusion"]),
        seed=int(round(float(blobs["backbone/seed"][0]))),
    )


def save_checkpoint(model: ReconstructionModel, optimizer: AdamW, epoch: int,
                    path, backbone_spec: BackboneSpec,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    blobs: dict[str, np.ndarray] = {"epoch": np.array([float(epoch)])}
    blobs.update(model.config_arrays())
    blobs.update(_backbone_arrays(backbone_spec))
    blobs["opt/lr"] = np.array([optimizer.lr])
    blobs["opt/weight_decay"] = np.array([optimizer.weight_decay])
    for name, arr in model.state_arrays().items():
        blobs[f"model/{name}"] = arr
    blobs.update(optimizer.state_tensors())
    if extra:
        blobs.update(extra)
    save_container(blobs, path)


def load_checkpoint(path) -> tuple[ReconstructionModel, AdamW, int, BackboneSpec]:
    blobs = load_container(path)
    model = ReconstructionModel.from_config_arrays(blobs)
    model.load_state_arrays({name[len("model/"):]: arr for name, arr in blobs.items()
                             if name.startswith("model/")})
    optimizer = AdamW(model.parameters(),
                      lr=float(blobs["opt/lr"][0]),
                      weight_decay=float(blobs["opt/weight_decay"][0]))
    optimizer.load_state_tensors({k: v for k, v in blobs.items() if k.startswith("opt/")})
    epoch = int(round(float(blobs["epoch"][0])))
    return model, optimizer, epoch, _backbone_from_arrays(blobs)
