"""Command-line interface.

Subcommands: ``make-toy`` (bundled procedural corpus), ``synth`` (inspect
pseudo-anomalies), ``train``, ``eval``, ``score``, and ``export-plots``.
Exit codes: 1 for configuration/format problems, 2 for dataset problems,
3 for numeric failures. ``eval`` and ``score`` print machine-readable JSON
on stdout; progress goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import toydata
from .errors import ConfigError, DatasetError, FormatError, NumericError, PromptADError
from .features import BackboneSpec, load_image, load_mask, save_image, save_mask
from .fileio import load_container, save_feature_file
from .inference import PromptPool, PromptPoolEntry, build_prompt_pool, score
from .metrics import ScoredImage, evaluate
from .model import ModelConfig, ReconstructionModel
from .synthesis import SynthesisParams, synthesize
from .trainer import (DatasetIndex, LoadedDataset, TrainConfig, Trainer,
                      load_checkpoint, save_checkpoint, scan_dataset, scan_test_split)
from .features import pool_feature


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_intlist(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


# key -> (parser, default); dataset paths are the only keys without defaults
CONFIG_SPEC: dict[str, tuple] = {
    "data_dir": (str, None),
    "image_size": (int, 224),
    "epochs": (int, 1000),
    "batch_size": (int, 64),
    "lr": (float, 1e-4),
    "lr_drop_epoch": (int, 800),
    "lr_drop_factor": (float, 0.1),
    "weight_decay": (float, 1e-4),
    "lam": (float, 0.5),
    "prompt_mode": (str, "random"),
    "seed": (int, 0),
    "use_restoration": (_parse_bool, True),
    "exclude_self_prompt": (_parse_bool, False),
    "grad_clip": (float, 1.0),
    "eval_interval": (int, 0),
    "num_encoder_layers": (int, 4),
    "num_decoder_layers": (int, 4),
    "num_heads": (int, 8),
    "mlp_hidden": (int, 0),
    "dropout": (float, 0.1),
    "decoder_variant": (str, "bidirectional"),
    "nma_enabled": (_parse_bool, True),
    "nma_radius": (int, 1),
    "refiner_enabled": (_parse_bool, True),
    "refiner_blocks": (int, 2),
    "refiner_channels": (int, 128),
    "final_query": (str, "prompt"),
    "backbone_kind": (str, "builtin-mini-cnn"),
    "stage_channels": (_parse_intlist, (8, 16, 32, 64)),
    "fusion_h": (int, 8),
    "fusion_w": (int, 8),
    "backbone_seed": (int, 7),
    "patch_area_lo": (float, 0.02),
    "patch_area_hi": (float, 0.15),
    "aspect_lo": (float, 0.3),
    "aspect_hi": (float, 3.3),
    "perlin_octaves": (int, 4),
    "perlin_threshold": (float, 0.5),
    "blend_opacity_lo": (float, 0.2),
    "blend_opacity_hi": (float, 1.0),
    "method_probability": (float, 0.5),
    "alpha": (float, 0.5),
    "smooth_sigma": (float, 0.0),
}


def parse_config_file(path) -> dict:
    """Flat key=value file, '#' comments, unknown keys rejected."""
    values = {key: default for key, (_, default) in CONFIG_SPEC.items()}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, text = line.partition("=")
        key = key.strip()
        if key not in CONFIG_SPEC:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        parser = CONFIG_SPEC[key][0]
        try:
            values[key] = parser(text.strip())
        except PromptADError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def _configs_from_values(values: dict):
    backbone = BackboneSpec(
        kind=values["backbone_kind"],
        stage_channels=tuple(values["stage_channels"]),
        fusion_size=(values["fusion_h"], values["fusion_w"]),
        seed=values["backbone_seed"],
    )
    model_cfg = ModelConfig(
        model_dim=backbone.channels,
        num_encoder_layers=values["num_encoder_layers"],
        num_decoder_layers=values["num_decoder_layers"],
        num_heads=values["num_heads"],
        mlp_hidden=values["mlp_hidden"],
        dropout=values["dropout"],
        decoder_variant=values["decoder_variant"],
        nma_enabled=values["nma_enabled"],
        nma_radius=values["nma_radius"],
        refiner_enabled=values["refiner_enabled"],
        refiner_blocks=values["refiner_blocks"],
        refiner_channels=values["refiner_channels"],
        final_query=values["final_query"],
    )
    train_cfg = TrainConfig(
        epochs=values["epochs"],
        batch_size=values["batch_size"],
        lr=values["lr"],
        lr_drop_epoch=values["lr_drop_epoch"],
        lr_drop_factor=values["lr_drop_factor"],
        weight_decay=values["weight_decay"],
        lam=values["lam"],
        prompt_mode=values["prompt_mode"],
        seed=values["seed"],
        use_restoration=values["use_restoration"],
        exclude_self_prompt=values["exclude_self_prompt"],
        grad_clip=values["grad_clip"],
        eval_interval=values["eval_interval"],
    )
    synth = SynthesisParams(
        patch_area_fraction=(values["patch_area_lo"], values["patch_area_hi"]),
        aspect_ratio=(values["aspect_lo"], values["aspect_hi"]),
        perlin_octaves=values["perlin_octaves"],
        perlin_threshold=values["perlin_threshold"],
        blend_opacity=(values["blend_opacity_lo"], values["blend_opacity_hi"]),
        method_probability=values["method_probability"],
    )
    return backbone, model_cfg, train_cfg, synth


# -- prompt-pool embedding in checkpoints --------------------------------------


def pool_arrays(pool: PromptPool) -> dict[str, np.ndarray]:
    return {f"pool/{i}/{e.class_id}": e.features for i, e in enumerate(pool.entries)}


def pool_from_arrays(blobs: dict[str, np.ndarray], backbone: BackboneSpec) -> PromptPool:
    entries = []
    keys = sorted((k for k in blobs if k.startswith("pool/")),
                  key=lambda k: int(k.split("/")[1]))
    for key in keys:
        class_id = key.split("/", 2)[2]
        feats = blobs[key]
        entries.append(PromptPoolEntry(class_id, feats, pool_feature(feats)))
    if not entries:
        raise FormatError("checkpoint carries no prompt pool")
    return PromptPool(entries, backbone)


# -- scoring a split ------------------------------------------------------------


def score_split(model: ReconstructionModel, pool: PromptPool, entries,
                alpha: float, smooth_sigma: float = 0.0) -> list[ScoredImage]:
    results = []
    for entry in entries:
        image = load_image(entry.path)
        sm = score(image, pool, model, alpha=alpha, smooth_sigma=smooth_sigma)
        gt = load_mask(entry.mask_path) if entry.mask_path else None
        results.append(ScoredImage(
            image_score=sm.image_score, label=entry.label, score_map=sm.s,
            gt_mask=gt, path=entry.path, class_id=entry.class_id))
    return results


def split_report(results: list[ScoredImage]) -> dict:
    classes = sorted({r.class_id for r in results})
    per_class = {}
    for cls in classes:
        per_class[cls] = evaluate([r for r in results if r.class_id == cls])
    mean = {key: float(np.mean([per_class[c][key] for c in classes]))
            for key in ("i_roc", "i_pr", "p_roc", "p_pr")}
    return {"classes": per_class, "mean": mean}


# -- subcommands -----------------------------------------------------------------


def cmd_make_toy(args) -> int:
    root = toydata.make_toy_corpus(
        args.out, seed=args.seed, n_train=args.train,
        n_test_good=args.test_good, n_test_anom=args.test_anom)
    print(f"toy corpus written to {root}", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    index = scan_dataset(args.data)
    dataset = LoadedDataset(index)
    params = SynthesisParams() if args.config is None else \
        _configs_from_values(parse_config_file(args.config))[3]
    rng = np.random.default_rng([args.seed, 777])
    pairs = [(c, i) for c in index.classes for i in range(len(index.train_paths[c]))]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        cls, idx = pairs[int(rng.integers(0, len(pairs)))]
        sample = synthesize(dataset.images[cls][idx], rng, params,
                            textures=dataset.textures_excluding(cls), source_index=idx)
        save_image(sample.image, out / f"{k:03d}.png")
        save_mask(sample.mask, out / f"{k:03d}_mask.png")
    print(f"wrote {args.count} image/mask pairs to {out}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    values = parse_config_file(args.config)
    if not values.get("data_dir"):
        raise ConfigError("config must set data_dir")
    backbone, model_cfg, train_cfg, synth = _configs_from_values(values)
    index = scan_dataset(values["data_dir"])
    dataset = LoadedDataset(index)
    size = values["image_size"]
    first = dataset.images[index.classes[0]][0]
    if first.shape[:2] != (size, size):
        raise DatasetError(f"dataset images are {first.shape[:2]}, config says {size}x{size}")
    model = ReconstructionModel(model_cfg, backbone.fusion_size, (size, size),
                                seed=train_cfg.seed)
    pool = build_prompt_pool(index, backbone, seed=train_cfg.seed)

    eval_fn = None
    if train_cfg.eval_interval:
        test_entries = scan_test_split(values["data_dir"])

        def eval_fn(m):
            return split_report(score_split(m, pool, test_entries, values["alpha"],
                                            values["smooth_sigma"]))["mean"]

    trainer = Trainer(dataset, model, backbone, train_cfg, synth, eval_fn=eval_fn)
    reports = trainer.run()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer.write_logs(out)
    ckpt = out / "checkpoint.onip"
    save_checkpoint(model, trainer.optimizer, train_cfg.epochs, ckpt, backbone,
                    extra=pool_arrays(pool))
    if reports:
        print(f"trained {train_cfg.epochs} epochs, final loss {reports[-1].total:.6f}",
              file=sys.stderr)
    print(f"checkpoint: {ckpt}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    model, _, _, backbone = load_checkpoint(args.checkpoint)
    pool = pool_from_arrays(load_container(args.checkpoint), backbone)
    entries = scan_test_split(args.data)
    results = score_split(model, pool, entries, args.alpha, args.smooth_sigma)
    report = {"dataset": str(args.data), "alpha": args.alpha,
              "n_images": len(results)}
    report.update(split_report(results))
    if args.plots:
        _plot_curves(results, Path(args.plots))
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_score(args) -> int:
    model, _, _, backbone = load_checkpoint(args.checkpoint)
    pool = pool_from_arrays(load_container(args.checkpoint), backbone)
    image = load_image(args.image)
    sm = score(image, pool, model, alpha=args.alpha, smooth_sigma=args.smooth_sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.imsave(out / f"{stem}_heat.png", sm.s, cmap="magma")
    save_feature_file(sm.s[:, :, None].astype(np.float32), out / f"{stem}_score.onip")
    print(json.dumps({"path": str(args.image), "class_selected": sm.class_selected,
                      "image_score": sm.image_score}))
    return 0


def _plot_curves(results: list[ScoredImage], out_dir: Path) -> None:
    from .metrics import EvalRecord, pr_points, roc_points

    out_dir.mkdir(parents=True, exist_ok=True)
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    rec = EvalRecord([r.image_score for r in results], [r.label for r in results])
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    fpr, tpr = roc_points(rec)
    axes[0].plot(fpr, tpr)
    axes[0].set_xlabel("FPR")
    axes[0].set_ylabel("TPR")
    axes[0].set_title("image-level ROC")
    recall, precision = pr_points(rec)
    axes[1].plot(recall, precision)
    axes[1].set_xlabel("recall")
    axes[1].set_ylabel("precision")
    axes[1].set_title("image-level PR")
    fig.tight_layout()
    fig.savefig(out_dir / "image_curves.png")
    plt.close(fig)


def cmd_export_plots(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    log = Path(args.log)
    if not log.is_file():
        raise ConfigError(f"log file {log} not found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = np.genfromtxt(log, delimiter=",", names=True)
    if data.size == 0:
        raise ConfigError(f"{log} contains no rows")
    data = np.atleast_1d(data)
    fig, ax = plt.subplots(figsize=(7, 4))
    for col in ("l_rec", "l_res", "l_seg", "total"):
        ax.plot(data["step"], data[col], label=col)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / f"loss_curves.{args.format}")
    plt.close(fig)

    traj = log.parent / "metrics_log.csv"
    if traj.is_file():
        tdata = np.atleast_1d(np.genfromtxt(traj, delimiter=",", names=True))
        if tdata.size:
            fig, ax = plt.subplots(figsize=(7, 4))
            for col in ("i_roc", "p_roc", "p_pr"):
                ax.plot(tdata["epoch"], tdata[col], marker="o", label=col)
            ax.set_xlabel("epoch")
            ax.set_ylabel("metric")
            ax.legend()
            fig.tight_layout()
            fig.savefig(out / f"metric_trajectory.{args.format}")
            plt.close(fig)
    print(f"plots written to {out}", file=sys.stderr)
    return 0


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptad",
                                     description="prompt-guided anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="generate the bundled procedural corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=8)
    p.add_argument("--test-good", type=int, default=4)
    p.add_argument("--test-anom", type=int, default=6)
    p.set_defaults(fn=cmd_make_toy)

    p = sub.add_parser("synth", help="write pseudo-anomaly image/mask pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--smooth-sigma", type=float, default=0.0)
    p.add_argument("--plots", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("score", help="score one image against a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--smooth-sigma", type=float, default=0.0)
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("export-plots", help="render training-log plots")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("png", "svg"), default="png")
    p.set_defaults(fn=cmd_export_plots)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
