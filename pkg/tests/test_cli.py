"""End-to-end command-line tests (in-process)."""

import json

import numpy as np
import pytest

from promptad.cli import main, parse_config_file
from promptad.errors import ConfigError

TINY_CONFIG = """
# tiny desk run for tests
data_dir={data}
image_size=32
epochs={epochs}
batch_size=4
lr=1e-3
lr_drop_epoch={drop}
stage_channels=2,2,2,2
fusion_h=4
fusion_w=4
backbone_seed=0
num_encoder_layers=1
num_decoder_layers=1
num_heads=1
mlp_hidden=16
dropout=0.0
refiner_channels=4
perlin_threshold=0.3
"""


def write_config(path, data, epochs=2, drop=1):
    path.write_text(TINY_CONFIG.format(data=data, epochs=epochs, drop=drop))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, toy_corpus):
    """One tiny CLI training run shared by the eval/score tests."""
    out = tmp_path_factory.mktemp("run")
    cfg = write_config(out / "run.cfg", toy_corpus)
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return out


class TestMakeToyAndSynth:
    def test_make_toy_layout(self, tmp_path):
        root = tmp_path / "corpus"
        assert main(["make-toy", "--out", str(root), "--seed", "3",
                     "--train", "3", "--test-good", "1", "--test-anom", "2"]) == 0
        assert (root / "grid" / "train" / "good" / "000.png").is_file()
        assert (root / "stripes" / "test" / "synthetic" / "001.png").is_file()
        assert (root / "stripes" / "ground_truth" / "synthetic" / "001_mask.png").is_file()

    def test_synth_writes_exact_count(self, tmp_path, toy_corpus):
        out = tmp_path / "synthout"
        assert main(["synth", "--data", str(toy_corpus), "--out", str(out),
                     "--seed", "1", "--count", "10"]) == 0
        images = sorted(p.name for p in out.iterdir() if not p.name.endswith("_mask.png"))
        masks = sorted(p.name for p in out.iterdir() if p.name.endswith("_mask.png"))
        assert len(images) == 10 and len(masks) == 10


class TestTrainCommand:
    def test_zero_epochs_writes_init_checkpoint(self, tmp_path, toy_corpus):
        out = tmp_path / "zero"
        cfg = write_config(tmp_path / "zero.cfg", toy_corpus, epochs=0, drop=800)
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "checkpoint.onip").is_file()
        assert (out / "train_log.csv").read_text().startswith("step,")

    def test_unknown_config_key_exit_1(self, tmp_path, toy_corpus):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(f"data_dir={toy_corpus}\nwat=1\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1

    def test_missing_dataset_exit_2(self, tmp_path):
        cfg = write_config(tmp_path / "c.cfg", tmp_path / "nope")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_missing_data_dir_key_exit_1(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("epochs=1\nlr_drop_epoch=0\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1

    def test_byte_identical_reruns(self, tmp_path, toy_corpus):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            cfg = write_config(tmp_path / f"{name}.cfg", toy_corpus)
            assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
            outs.append(out)
        log_a = (outs[0] / "train_log.csv").read_bytes()
        log_b = (outs[1] / "train_log.csv").read_bytes()
        assert log_a == log_b
        ckpt_a = (outs[0] / "checkpoint.onip").read_bytes()
        ckpt_b = (outs[1] / "checkpoint.onip").read_bytes()
        assert ckpt_a == ckpt_b


class TestEvalCommand:
    def test_eval_emits_json_report(self, trained, toy_corpus, capsys):
        code = main(["eval", "--checkpoint", str(trained / "checkpoint.onip"),
                     "--data", str(toy_corpus), "--alpha", "0.5"])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert set(report["classes"]) == {"blobs", "grid", "stripes"}
        for stats in report["classes"].values():
            for key in ("i_roc", "i_pr", "p_roc", "p_pr"):
                assert 0.0 <= stats[key] <= 1.0
        assert set(report["mean"]) == {"i_roc", "i_pr", "p_roc", "p_pr"}

    def test_train_then_eval_round_trip_never_errors(self, trained, toy_corpus):
        assert main(["eval", "--checkpoint", str(trained / "checkpoint.onip"),
                     "--data", str(toy_corpus)]) == 0

    def test_bad_checkpoint_exit_1(self, tmp_path, toy_corpus):
        path = tmp_path / "junk.onip"
        path.write_bytes(b"JUNK" * 10)
        assert main(["eval", "--checkpoint", str(path), "--data", str(toy_corpus)]) == 1


class TestScoreCommand:
    def test_score_writes_heatmap_tensor_and_json(self, trained, toy_corpus, tmp_path, capsys):
        image = next((toy_corpus / "grid" / "test" / "synthetic").glob("*.png"))
        out = tmp_path / "scores"
        code = main(["score", "--checkpoint", str(trained / "checkpoint.onip"),
                     "--image", str(image), "--out", str(out)])
        assert code == 0
        line = json.loads(capsys.readouterr().out)
        assert set(line) == {"path", "class_selected", "image_score"}
        assert (out / f"{image.stem}_heat.png").is_file()
        onip = out / f"{image.stem}_score.onip"
        assert onip.is_file()
        from promptad.fileio import load_feature_file
        smap = load_feature_file(onip)
        assert smap.shape == (32, 32, 1)
        assert abs(float(smap.max()) - line["image_score"]) < 1e-5


class TestExportPlots:
    def test_plots_written(self, trained, tmp_path):
        out = tmp_path / "plots"
        assert main(["export-plots", "--log", str(trained / "train_log.csv"),
                     "--out", str(out)]) == 0
        assert (out / "loss_curves.png").is_file()

    def test_svg_format(self, trained, tmp_path):
        out = tmp_path / "plots_svg"
        assert main(["export-plots", "--log", str(trained / "train_log.csv"),
                     "--out", str(out), "--format", "svg"]) == 0
        assert (out / "loss_curves.svg").is_file()

    def test_missing_log_exit_1(self, tmp_path):
        assert main(["export-plots", "--log", str(tmp_path / "none.csv"),
                     "--out", str(tmp_path)]) == 1


class TestConfigParsing:
    def test_defaults_fill_unset_keys(self, tmp_path, toy_corpus):
        cfg = tmp_path / "min.cfg"
        cfg.write_text(f"data_dir={toy_corpus}\n")
        values = parse_config_file(cfg)
        assert values["epochs"] == 1000 and values["alpha"] == 0.5

    def test_comments_and_blanks_ignored(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment only\n\nepochs=4  # trailing\n")
        assert parse_config_file(cfg)["epochs"] == 4

    def test_malformed_line_rejected(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("epochs\n")
        with pytest.raises(ConfigError):
            parse_config_file(cfg)

    def test_bad_value_reports_line(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("epochs=soon\n")
        with pytest.raises(ConfigError, match=":1:"):
            parse_config_file(cfg)
