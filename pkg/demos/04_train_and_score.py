"""End-to-end walkthrough: toy corpus, training, prompt pool, scoring.

This is a shortened run (40 epochs) purely to show the moving parts; the
acceptance suite trains the full desk configuration.

Run:  python demos/04_train_and_score.py
"""

import tempfile
from pathlib import Path

import numpy as np

from promptad.cli import score_split, split_report
from promptad.features import load_image
from promptad.inference import build_prompt_pool, score
from promptad.model import ReconstructionModel
from promptad.toydata import (desk_backbone_spec, desk_model_config, desk_synth_params,
                              desk_train_config, make_toy_corpus)
from promptad.trainer import LoadedDataset, Trainer, scan_dataset, scan_test_split

tmp = Path(tempfile.mkdtemp())
root = make_toy_corpus(tmp / "corpus", seed=0)
print("corpus at", root)

index = scan_dataset(root)
dataset = LoadedDataset(index)
backbone = desk_backbone_spec()
model = ReconstructionModel(desk_model_config(), backbone.fusion_size, (32, 32), seed=0)
config = desk_train_config(epochs=40, lr_drop_epoch=32)

trainer = Trainer(dataset, model, backbone, config, desk_synth_params())
reports = trainer.run()
print(f"trained {config.epochs} epochs; loss {reports[0].total:.3f} -> {reports[-1].total:.3f}")

# class-agnostic inference: one prompt per class, cosine selection
pool = build_prompt_pool(index, backbone, seed=0)
print("prompt pool classes:", [e.class_id for e in pool.entries])

entries = scan_test_split(root)
anom = next(e for e in entries if e.label == 1)
sm = score(load_image(anom.path), pool, model, alpha=0.5)
print(f"scored {Path(anom.path).name}: class={sm.class_selected} "
      f"image_score={sm.image_score:.3f}")

report = split_report(score_split(model, pool, entries, alpha=0.5))
print("mean metrics after the short run:", {k: round(v, 3) for k, v in report["mean"].items()})
