"""Multi-stage EfficientNet-b4 feature extraction to ONIP files.

The four pyramid levels at strides 2/4/8/16 (24 + 32 + 56 + 160 channels)
are bilinearly resized to a common fusion grid and concatenated into a
272-channel map per image. Weights are the standard ImageNet-pretrained
ones; a seeded random-init mode exists so format conformance can be tested
offline.
"""

from __future__ import annotations

import hashlib
import json
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torchvision.models import efficientnet_b4

from .onip import write_feature_file

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
STAGE_STRIDES = (2, 4, 8, 16)

WEIGHTS_HELP = (
    "pretrained EfficientNet-b4 weights are unavailable; download them once with\n"
    "  python -c \"from torchvision.models import efficientnet_b4, EfficientNet_B4_Weights; "
    "efficientnet_b4(weights=EfficientNet_B4_Weights.IMAGENET1K_V1)\"\n"
    "on a machine with network access (cached under ~/.cache/torch), or pass "
    "--weights random for a seeded random-init backbone (testing only)."
)


class WeightsUnavailable(RuntimeError):
    pass


@dataclass
class ExportManifest:
    dataset_root: str
    output_root: str
    image_size: int = 224
    fusion_size: tuple[int, int] = (14, 14)
    weights: str = "pretrained"
    channels: int = 0
    files: dict[str, str] = field(default_factory=dict)  # relpath -> sha256
    skipped: int = 0

    def to_json(self) -> str:
        payload = dict(self.__dict__)
        payload["fusion_size"] = list(self.fusion_size)
        return json.dumps(payload, indent=2, sort_keys=True)


class StageExtractor:
    """Frozen backbone emitting the last feature map at each pyramid stride."""

    def __init__(self, weights: str = "pretrained", seed: int = 0):
        if weights == "pretrained":
            try:
                from torchvision.models import EfficientNet_B4_Weights
                model = efficientnet_b4(weights=EfficientNet_B4_Weights.IMAGENET1K_V1)
            except Exception as exc:  # URL errors, missing cache, hash mismatch
                raise WeightsUnavailable(f"{WEIGHTS_HELP}\n(cause: {exc})") from exc
        elif weights == "random":
            torch.manual_seed(seed)
            model = efficientnet_b4(weights=None)
        else:
            state = torch.load(weights, map_location="cpu", weights_only=True)
            model = efficientnet_b4(weights=None)
            model.load_state_dict(state)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.features = model.features
        self.weights = weights

    @torch.no_grad()
    def stage_maps(self, batch: torch.Tensor) -> list[torch.Tensor]:
        """Feature maps at strides 2/4/8/16 for an (n, 3, s, s) batch."""
        size = batch.shape[-1]
        by_stride: dict[int, torch.Tensor] = {}
        out = batch
        for block in self.features:
            out = block(out)
            by_stride[size // out.shape[-1]] = out
        return [by_stride[s] for s in STAGE_STRIDES]

    @torch.no_grad()
    def fused_features(self, batch: torch.Tensor, fusion_size: tuple[int, int]) -> torch.Tensor:
        """(n, h, w, 272) channel-last fused map at the fusion grid."""
        resized = [F.interpolate(m, size=fusion_size, mode="bilinear", align_corners=False)
                   for m in self.stage_maps(batch)]
        fused = torch.cat(resized, dim=1)
        return fused.permute(0, 2, 3, 1).contiguous()


def load_and_preprocess(path, image_size: int) -> torch.Tensor:
    with Image.open(path) as im:
        im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
    arr = np.asarray(im, dtype=np.float32) / 255.0
    arr = (arr - np.array(IMAGENET_MEAN, dtype=np.float32)) / np.array(IMAGENET_STD, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1))[None]


def sha256_of(path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def export(dataset_dir, out_dir, image_size: int = 224,
           fusion_size: tuple[int, int] = (14, 14),
           weights: str = "pretrained", seed: int = 0,
           suffixes: tuple[str, ...] = (".png", ".jpg", ".jpeg", ".bmp")) -> ExportManifest:
    """Write one ONIP feature file per image, mirroring the directory tree."""
    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir)
    if not dataset_dir.is_dir():
        raise FileNotFoundError(f"dataset directory {dataset_dir} not found")
    extractor = StageExtractor(weights=weights, seed=seed)
    manifest = ExportManifest(str(dataset_dir), str(out_dir),
                              image_size=image_size, fusion_size=tuple(fusion_size),
                              weights=weights)
    images = sorted(p for p in dataset_dir.rglob("*")
                    if p.is_file() and p.suffix.lower() in suffixes)
    for img_path in images:
        rel = img_path.relative_to(dataset_dir)
        try:
            batch = load_and_preprocess(img_path, image_size)
        except Exception as exc:
            warnings.warn(f"skipping unreadable image {img_path}: {exc}")
            manifest.skipped += 1
            continue
        fused = extractor.fused_features(batch, tuple(fusion_size))[0].numpy()
        manifest.channels = fused.shape[-1]
        target = (out_dir / rel).with_suffix(".onip")
        target.parent.mkdir(parents=True, exist_ok=True)
        write_feature_file(fused, target)
        manifest.files[str(rel.with_suffix(".onip"))] = sha256_of(target)
    (out_dir / "manifest.json").parent.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(manifest.to_json() + "\n")
    return manifest
