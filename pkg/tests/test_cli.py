import csv
import json

import numpy as np
import pytest

from superkernel import cli
from superkernel.cli import main, parse_layers, read_pgm, resolve_config, write_pgm

TINY = {
    "model": {"variant": "pseudo", "d_model": 16, "mlp_dim": 32, "n_layers": 2, "n_heads": 2, "patch_size": 2, "image_size": 8},
    "decoder": {"d_model": 16, "mlp_dim": 32, "n_layers": 2, "n_heads": 2},
    "finetune.n_layers": 1,
    "train": {"batch_size": 32, "lr": 0.003, "steps": 200},
    "data.n_train": 512,
    "data.n_test": 200,
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def load(path):
    return json.loads(path.read_text())


class TestConfig:
    def test_nested_and_flat_keys(self, tiny_config):
        cfg = resolve_config("pretrain", tiny_config, [("train.lr", 0.01)])
        assert cfg["model.d_model"] == 16 and cfg["train.lr"] == 0.01 and cfg["train.steps"] == 200

    def test_finetune_epoch_default(self):
        assert resolve_config("finetune", None, [])["train.epochs"] == 800
        assert resolve_config("pretrain", None, [])["train.epochs"] == 1600

    def test_unknown_key(self):
        with pytest.raises(cli.UsageError):
            resolve_config("verify", None, [("model.depth", 3)])

    def test_type_checked(self):
        with pytest.raises(cli.UsageError):
            resolve_config("verify", None, [("model.d_model", "big")])
        assert resolve_config("verify", None, [("train.lr", 1)])["train.lr"] == 1.0

    def test_set_parses_json(self):
        assert cli.parse_override("model.variant=gaussian") == ("model.variant", "gaussian")
        assert cli.parse_override("train.hflip=true") == ("train.hflip", True)

    def test_parse_layers(self):
        assert parse_layers("1-3,5", 6) == [1, 2, 3, 5]
        assert parse_layers(None, 2) == [1, 2]
        with pytest.raises(cli.UsageError):
            parse_layers("7", 6)


class TestVerify:
    def test_params_and_bspline(self, tmp_path, capsys):
        assert main(["verify", "--suite", "params,bspline", "--out", str(tmp_path)]) == 0
        report = load(tmp_path / "verify_report.json")
        checks = {c["name"]: c for c in report["suites"]["params"]}
        assert checks["attn_block_standard"]["value"] == 263_168
        assert checks["attn_block_pseudo"]["value"] == 139_776
        assert checks["attn_block_semi"]["value"] == 147_968
        assert report["suites"]["bspline"][0]["value"] <= 1e-12
        assert report["passed"] is True

    def test_embed_f64(self, tmp_path):
        assert main(["verify", "--suite", "embed", "--precision", "f64", "--out", str(tmp_path)]) == 0
        assert all(c["value"] <= 1e-10 for c in load(tmp_path / "verify_report.json")["suites"]["embed"])

    def test_exit_code_tracks_failures(self, tmp_path, monkeypatch):
        monkeypatch.setitem(cli.run_suites.__globals__["SUITES"], "params", lambda seed=0: [cli.run_suites.__globals__["Check"]("x", 1.0, "< 0", False)])
        assert main(["verify", "--suite", "params", "--out", str(tmp_path)]) == 1
        assert load(tmp_path / "verify_report.json")["passed"] is False
        assert load(tmp_path / "run_manifest.json")["exit_code"] == 1

    def test_unknown_suite(self, tmp_path):
        assert main(["verify", "--suite", "everything", "--out", str(tmp_path)]) == 2

    def test_manifest_written_first(self, tmp_path, monkeypatch):
        seen = {}

        def spy(args, cfg, out):
            seen["manifest"] = load(out / "run_manifest.json")
            seen["files"] = sorted(p.name for p in out.iterdir())
            return 0

        monkeypatch.setitem(cli.COMMANDS, "verify", spy)
        assert main(["verify", "--seed", "4", "--out", str(tmp_path)]) == 0
        assert seen["files"] == ["run_manifest.json"]
        assert seen["manifest"]["seed"] == 4 and seen["manifest"]["exit_code"] is None
        final = load(tmp_path / "run_manifest.json")
        assert final["exit_code"] == 0 and final["finished_at"]


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["pretrain", "--config", str(cfg), "--out", str(root / "pre")]) == 0
    return root, str(cfg)


class TestTraining:
    def test_pretrain_halves_loss(self, pretrained):
        root, _ = pretrained
        summary = load(root / "pre" / "summary.json")
        assert summary["steps"] == 200 and summary["final_loss"] <= 0.5 * summary["first_loss"]
        rows = list(csv.reader(open(root / "pre" / "metrics.csv")))
        assert rows[0] == ["step", "lr", "loss", "split"] and len(rows) == 201

    def test_finetune_from_checkpoint(self, pretrained, tmp_path):
        root, cfg = pretrained
        code = main(["finetune", "--config", cfg, "--set", "train.steps=60", "--checkpoint", str(root / "pre" / "step_000200"), "--out", str(tmp_path)])
        assert code == 0
        summary = load(tmp_path / "summary.json")
        assert summary["copied_parameters"] > 0 and 0.0 <= summary["test_accuracy"] <= 1.0

    def test_finetune_refuses_mismatched_checkpoint(self, pretrained, tmp_path, capsys):
        root, cfg = pretrained
        code = main(["finetune", "--config", cfg, "--set", "model.d_model=32", "--checkpoint", str(root / "pre" / "step_000200"), "--out", str(tmp_path)])
        assert code == 2
        err = capsys.readouterr().err
        ck = load(root / "pre" / "step_000200" / "manifest.json")
        assert ck["config"]["model"]["arch_hash"] in err
        assert cli.arch_hash(resolve_config("finetune", cfg, [("model.d_model", 32)])) in err

    def test_pretrain_resume_matches(self, pretrained, tmp_path):
        root, cfg = pretrained
        args = ["pretrain", "--config", cfg, "--set", "train.steps=12", "--set", "train.checkpoint_every=5"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        # continue the second run from its step-5 checkpoint into a fresh metrics file
        assert main(args + ["--out", str(tmp_path / "c"), "--resume", str(tmp_path / "b" / "step_000005")]) == 0
        a = list(csv.reader(open(tmp_path / "a" / "metrics.csv")))
        c = list(csv.reader(open(tmp_path / "c" / "metrics.csv")))
        assert c[1:] == a[6:]


class TestProbe:
    def test_maps_are_stochastic(self, pretrained, tmp_path):
        root, cfg = pretrained
        assert main(["probe", "--checkpoint", str(root / "pre" / "step_000200"), "--out", str(tmp_path)]) == 0
        layer = tmp_path / "layer_01"
        heads = [np.loadtxt(layer / f"head_{h}.csv", delimiter=",") for h in range(2)]
        for m in heads:
            assert np.abs(m.sum(axis=1) - 1).max() <= 1e-4
        np.testing.assert_allclose(np.loadtxt(layer / "mean.csv", delimiter=","), np.mean(heads, axis=0), atol=1e-8)
        grid = np.loadtxt(layer / "cls_head_0.csv", delimiter=",")
        assert grid.shape == (4, 4)
        np.testing.assert_allclose(grid.ravel(), heads[0][0, 1:], atol=1e-9)
        assert read_pgm(layer / "head_0.pgm").shape == (17, 17)
        assert (tmp_path / "layer_02").is_dir()

    def test_gaussian_scores_symmetric(self, tmp_path, tiny_config):
        ft = tmp_path / "ft"
        args = ["--config", tiny_config, "--set", "model.variant=gaussian"]
        assert main(["finetune", *args, "--set", "train.steps=3", "--out", str(ft)]) == 0
        out = tmp_path / "probe"
        assert main(["probe", "--checkpoint", str(ft / "step_000003"), "--raw-scores", "--out", str(out)]) == 0
        s = np.loadtxt(out / "layer_01" / "scores_head_0.csv", delimiter=",")
        assert np.abs(s - s.T).max() <= 1e-4
        assert load(out / "probe_report.json")["layers"]["1"]["score_asymmetry"] <= 1e-4

    def test_images_from_npy(self, pretrained, tmp_path):
        root, _ = pretrained
        imgs = np.random.default_rng(0).integers(0, 256, size=(3, 3, 8, 8), dtype=np.uint8)
        np.save(tmp_path / "imgs.npy", imgs)
        code = main(["probe", "--checkpoint", str(root / "pre" / "step_000200"), "--images", str(tmp_path / "imgs.npy"), "--index", "2", "--layers", "2", "--out", str(tmp_path / "p")])
        assert code == 0 and not (tmp_path / "p" / "layer_01").exists()

    def test_layer_out_of_range(self, pretrained, tmp_path):
        root, _ = pretrained
        assert main(["probe", "--checkpoint", str(root / "pre" / "step_000200"), "--layers", "9", "--out", str(tmp_path)]) == 2


class TestBench:
    def test_small_grid_agreement_and_refusal(self, tmp_path):
        code = main(["bench", "--grid", "1,6,4;2,8,8", "--reps", "3", "--block-rows", "3", "--block-refs", "2", "--budget-bytes", "20000", "--out", str(tmp_path)])
        assert code == 0
        rows = list(csv.DictReader(open(tmp_path / "bench.csv")))
        first = [r for r in rows if r["S"] == "6"]
        assert [r["status"] for r in first] == ["ok", "ok"]
        assert all(int(r["reps"]) == 3 and float(r["min_s"]) <= float(r["median_s"]) for r in first)
        assert float(first[0]["max_abs_diff"]) <= 1e-6
        big = {r["mode"]: r for r in rows if r["S"] == "8"}
        assert big["materialized"]["status"] == "refused"
        assert int(big["materialized"]["estimate_bytes"]) == 2 * 8 * 8 * 8 * 8 * 4
        assert big["streamed"]["status"] == "ok"


def test_pgm_roundtrip(tmp_path):
    m = np.array([[0.0, 0.5], [1.0, 0.25]])
    write_pgm(tmp_path / "m.pgm", m)
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), [[0, 128], [255, 64]])
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n2 2\n255\n")
