"""End-to-end CLI coverage: every subcommand, exit codes, determinism, and
artifact layout.  Runs in-process via main(argv)."""

import json
import os

import numpy as np
import pytest

from sydes.cli import main
from sydes.config import RunConfig

FAST_CONFIG = {
    "encoder": {"image_dim": 16, "text_dim": 16, "image_layers": 1,
                "text_layers": 1, "image_heads": 2, "text_heads": 2,
                "seq_len": 16},
    "decoder_layers": 1,
    "pretrain": {"epochs": 2, "batch_size": 4},
    "finetune": {"epochs": 2, "batch_size": 4},
}


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def read_text(path):
    with open(path, encoding="utf-8") as f:
        return f.read()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared corpus + config + pretrain checkpoint for the command tests."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    cfg_path = str(root / "config.json")
    cfg = dict(FAST_CONFIG)
    cfg["data_dir"] = data
    with open(cfg_path, "w") as f:
        json.dump(cfg, f)
    rc = main(["gen-data", "--config", cfg_path, "--out", data,
               "--n", "12", "--val-n", "8", "--test-n", "8", "--seed", "0"])
    assert rc == 0
    out = str(root / "run")
    rc = main(["pretrain", "--config", cfg_path, "--data", data,
               "--out", out, "--seed", "0"])
    assert rc == 0
    return {"root": root, "data": data, "config": cfg_path, "out": out,
            "ckpt": os.path.join(out, "pretrain-epoch2.ckpt")}


class TestGenData:
    def test_writes_manifests_and_images(self, workspace):
        data = workspace["data"]
        for split, count in (("train", 12), ("val", 8), ("test", 8)):
            path = os.path.join(data, f"{split}.jsonl")
            assert os.path.isfile(path)
            assert len(read_text(path).strip().split("\n")) == count
        images = os.listdir(os.path.join(data, "images"))
        assert len(images) == 28

    def test_seed_repeat_identical_bytes(self, tmp_path):
        for sub in ("a", "b"):
            rc = main(["gen-data", "--out", str(tmp_path / sub), "--n", "4",
                       "--seed", "3"])
            assert rc == 0
        a = read_text(tmp_path / "a" / "train.jsonl")
        b = read_text(tmp_path / "b" / "train.jsonl")
        assert a == b


class TestPretrain:
    def test_artifacts(self, workspace):
        out = workspace["out"]
        assert os.path.isfile(workspace["ckpt"])
        assert os.path.isfile(os.path.join(out, "pretrain-log.csv"))
        assert os.path.isfile(os.path.join(out, "vocab.txt"))

    def test_seed_repeat_identical_checkpoint(self, workspace, tmp_path):
        out2 = str(tmp_path / "again")
        rc = main(["pretrain", "--config", workspace["config"],
                   "--data", workspace["data"], "--out", out2, "--seed", "0"])
        assert rc == 0
        a = read_bytes(workspace["ckpt"])
        b = open(os.path.join(out2, "pretrain-epoch2.ckpt"), "rb").read()
        assert a == b

    def test_mask_ratio_override_logged(self, workspace, tmp_path, capsys):
        out2 = str(tmp_path / "mask")
        rc = main(["pretrain", "--config", workspace["config"],
                   "--data", workspace["data"], "--out", out2, "--seed", "0",
                   "--mask-ratio", "0.25", "--epochs", "1"])
        assert rc == 0
        captured = capsys.readouterr().out
        assert "0.25" in captured and "12/16" in captured

    def test_missing_manifest_is_data_error(self, workspace, tmp_path):
        rc = main(["pretrain", "--config", workspace["config"],
                   "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")])
        assert rc == 2


@pytest.fixture(scope="module")
def finetuned(workspace):
    out = str(workspace["root"] / "ft")
    rc = main(["finetune", "--task", "sentiment",
               "--checkpoint", workspace["ckpt"],
               "--data", workspace["data"], "--out", out, "--seed", "0"])
    assert rc == 0
    return os.path.join(out, "sentiment", "finetune-epoch2.ckpt")


class TestFinetuneEval:
    def test_finetune_artifacts(self, finetuned):
        assert os.path.isfile(finetuned)
        assert os.path.isfile(os.path.join(os.path.dirname(finetuned),
                                           "finetune-log.csv"))

    def test_eval_reports_metrics(self, workspace, finetuned, tmp_path, capsys):
        rc = main(["eval", "--checkpoint", finetuned, "--data", workspace["data"],
                   "--split", "test", "--out", str(tmp_path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "macro F1" in out and "task: sentiment" in out
        report = json.load(open(tmp_path / "metrics-sentiment-test.json"))
        assert set(report) >= {"accuracy", "precision", "recall", "macro_f1"}

    def test_no_itc_flag(self, workspace, tmp_path):
        out = str(tmp_path / "noitc")
        rc = main(["finetune", "--task", "emotion",
                   "--checkpoint", workspace["ckpt"],
                   "--data", workspace["data"], "--out", out, "--seed", "0",
                   "--no-itc", "--epochs", "1"])
        assert rc == 0
        log = open(os.path.join(out, "emotion", "finetune-log.csv")).read()
        # with the contrastive weight zeroed, loss column equals cls column
        rows = [line.split(",") for line in log.strip().split("\n")]
        li, ci = rows[0].index("loss"), rows[0].index("cls")
        for row in rows[1:]:
            assert row[li] == row[ci]

    def test_missing_checkpoint_fails(self, workspace, tmp_path):
        rc = main(["finetune", "--task", "sentiment",
                   "--checkpoint", str(tmp_path / "nope.ckpt"),
                   "--data", workspace["data"], "--out", str(tmp_path / "o")])
        assert rc != 0


class TestReconstruct:
    def test_writes_triptychs_and_attention(self, workspace, tmp_path):
        out = str(tmp_path / "recon")
        rc = main(["reconstruct", "--checkpoint", workspace["ckpt"],
                   "--data", workspace["data"], "--out", out,
                   "--mask-ratio", "0.75", "--n", "2", "--seed", "1"])
        assert rc == 0
        files = os.listdir(out)
        trips = [f for f in files if f.startswith("triptych-")]
        attns = [f for f in files if f.startswith("attention-")]
        assert len(trips) == 2
        assert len(attns) == 2 * 4  # two samples x default four decoder heads
        from sydes.ppm import read_ppm
        img = read_ppm(os.path.join(out, sorted(trips)[0]))
        assert img.shape == (64, 3 * 64, 3)
        grid = np.loadtxt(os.path.join(out, sorted(attns)[0]), delimiter=",")
        assert grid.shape == (15, 5 * 17)  # (S-1) x 5(P+1)
        assert np.all(np.abs(grid.sum(axis=1) - 1.0) < 1e-6)

    def test_mask_ratio_zero_rejected(self, workspace, tmp_path):
        rc = main(["reconstruct", "--checkpoint", workspace["ckpt"],
                   "--data", workspace["data"], "--out", str(tmp_path / "x"),
                   "--mask-ratio", "0"])
        assert rc == 1


class TestGradcheckCommand:
    def test_passes_and_prints_lines(self, capsys):
        rc = main(["gradcheck", "--cases", "3", "--seed", "2"])
        assert rc == 0
        out = capsys.readouterr().out
        for name in ("rec", "itc", "si", "dc", "cls", "pretrain_total", "finetune_total"):
            assert name in out
        assert "pass" in out


class TestUsage:
    def test_unknown_command_exit_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1

    def test_bad_flag_exit_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["pretrain", "--nonsense"])
        assert exc.value.code == 1

    def test_bad_config_file_exit_1(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"bogus_key": 1}')
        rc = main(["pretrain", "--config", str(bad), "--data", str(tmp_path)])
        assert rc == 1

    def test_invalid_task_choice_exit_1(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["finetune", "--task", "sarcasm", "--checkpoint", "x"])
        assert exc.value.code == 1


def test_config_documents_defaults():
    """The default config serializes completely (gives users a template)."""
    d = RunConfig().to_dict()
    assert d["pretrain"]["mask_ratio"] == 0.75
    assert d["finetune"]["weights"]["itc"] == pytest.approx(0.4)


def test_threads_env_caps_kernel_pools():
    """SYDES_THREADS propagates to the BLAS thread-pool variables before
    numpy loads (must run in a fresh interpreter)."""
    import subprocess
    import sys

    code = ("import os; os.environ['SYDES_THREADS'] = '1'; "
            "import sydes.cli; "
            "print(os.environ['OMP_NUM_THREADS'], os.environ['OPENBLAS_NUM_THREADS'])")
    env = {k: v for k, v in os.environ.items()
           if k not in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS")}
    out = subprocess.run([sys.executable, "-c", code], capture_output=True,
                         text=True, env=env, check=True)
    assert out.stdout.split() == ["1", "1"]
