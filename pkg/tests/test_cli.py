"""Command-line surface: flows, exit codes, artifact determinism."""

import json

import pytest

from cplearn.cli import main
from cplearn.concept_cache import read_cache
from cplearn.evaluator import EvalReport


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    code = main(["make-toy", "--out", str(out), "--classes", "4",
                 "--shots-per-class", "4", "--test-per-class", "3",
                 "--dim", "8", "--levels", "2", "--lexicon-size", "16",
                 "--seed", "0"])
    assert code == 0
    return out


QUICK_TRAIN = ["--epochs", "2", "--batch-size", "16", "--k", "2", "--heads", "2"]


class TestMakeToyAndCache:
    def test_build_cache_round_trip(self, toy_dir, tmp_path):
        cache_path = tmp_path / "cache.cplc"
        code = main(["build-cache", "--manifest", str(toy_dir / "manifest.json"),
                     "--out", str(cache_path)])
        assert code == 0
        cache = read_cache(cache_path)
        assert len(cache.values) == 16  # --concepts default capped at lexicon size

    def test_missing_lexicon_is_usage_error(self, toy_dir, tmp_path):
        code = main(["build-cache", "--manifest", str(toy_dir / "manifest.json"),
                     "--lexicon", str(tmp_path / "nope.cpll"),
                     "--out", str(tmp_path / "cache.cplc")])
        assert code == 2

    def test_concepts_flag_truncates(self, toy_dir, tmp_path):
        cache_path = tmp_path / "cache8.cplc"
        code = main(["build-cache", "--manifest", str(toy_dir / "manifest.json"),
                     "--concepts", "8", "--out", str(cache_path)])
        assert code == 0
        assert len(read_cache(cache_path).values) == 8


class TestTrain:
    def test_train_writes_checkpoint_and_log(self, toy_dir, tmp_path):
        ckpt = tmp_path / "model.cplm"
        code = main(["train", "--manifest", str(toy_dir / "manifest.json"),
                     "--out", str(ckpt)] + QUICK_TRAIN)
        assert code == 0
        assert ckpt.exists()
        log = (tmp_path / "model.cplm.log").read_text().strip().splitlines()
        assert len(log) == 2
        assert all("loss=" in line and "lr=" in line for line in log)

    def test_determinism_byte_for_byte(self, toy_dir, tmp_path):
        blobs = []
        for name in ("a.cplm", "b.cplm"):
            path = tmp_path / name
            assert main(["train", "--manifest", str(toy_dir / "manifest.json"),
                         "--out", str(path), "--seed", "3"] + QUICK_TRAIN) == 0
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]

    def test_config_file_precedence(self, toy_dir, tmp_path):
        config = tmp_path / "run.json"
        config.write_text(json.dumps({"epochs": 1, "k": 2, "batch_size": 16,
                                      "heads": 2}))
        ckpt = tmp_path / "model.cplm"
        code = main(["train", "--manifest", str(toy_dir / "manifest.json"),
                     "--config", str(config), "--out", str(ckpt),
                     "--epochs", "2"])  # flag beats config file
        assert code == 0
        log = (tmp_path / "model.cplm.log").read_text().strip().splitlines()
        assert len(log) == 2

    def test_missing_manifest_exit_2(self, tmp_path):
        code = main(["train", "--manifest", str(tmp_path / "none.json"),
                     "--out", str(tmp_path / "x.cplm")])
        assert code == 2

    def test_freeze_alpha_beta_flag(self, toy_dir, tmp_path):
        from cplearn.model import load_checkpoint
        frozen = tmp_path / "frozen.cplm"
        assert main(["train", "--manifest", str(toy_dir / "manifest.json"),
                     "--out", str(frozen), "--freeze-alpha-beta"] + QUICK_TRAIN) == 0
        ckpt = load_checkpoint(frozen)
        assert ckpt.fusion.alpha.item() == pytest.approx(1e-4)
        assert ckpt.fusion.beta.item() == pytest.approx(1e-4)


class TestEvalTransferAblate:
    def test_eval_base_novel_csv(self, toy_dir, tmp_path):
        out = tmp_path / "report.csv"
        code = main(["eval", "--manifest", str(toy_dir / "manifest.json"),
                     "--split", "base-novel", "--out", str(out)] + QUICK_TRAIN)
        assert code == 0
        report = EvalReport.from_csv(out.read_text())
        assert report.base_accuracy is not None
        assert report.novel_accuracy is not None
        assert report.hm is not None
        assert report.config_snapshot["epochs"] == 2

    def test_transfer_to_variant(self, toy_dir, tmp_path):
        variant = tmp_path / "variant"
        assert main(["make-toy", "--out", str(variant), "--classes", "4",
                     "--shots-per-class", "4", "--test-per-class", "3",
                     "--dim", "8", "--levels", "2", "--lexicon-size", "16",
                     "--seed", "0", "--variant", "1", "--name", "toy-b"]) == 0
        ckpt = tmp_path / "model.cplm"
        cache = tmp_path / "cache.cplc"
        assert main(["train", "--manifest", str(toy_dir / "manifest.json"),
                     "--out", str(ckpt), "--cache-out", str(cache)] + QUICK_TRAIN) == 0
        out = tmp_path / "transfer.csv"
        code = main(["transfer", "--checkpoint", str(ckpt), "--cache", str(cache),
                     "--targets",
                     f"{toy_dir / 'manifest.json'},{variant / 'manifest.json'}",
                     "--out", str(out)])
        assert code == 0
        text = out.read_text()
        assert "average" in text

    def test_ablate_k_axis(self, toy_dir, tmp_path):
        out = tmp_path / "grid.csv"
        code = main(["ablate", "--manifest", str(toy_dir / "manifest.json"),
                     "--axis", "K", "--values", "1,2",
                     "--out", str(out), "--epochs", "1", "--batch-size", "16",
                     "--heads", "2"])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 3  # header + 2 cells

    def test_bad_split_usage_error(self, toy_dir):
        code = main(["eval", "--manifest", str(toy_dir / "manifest.json"),
                     "--split", "bogus"] + QUICK_TRAIN)
        assert code == 2

    def test_transfer_accepts_bare_bank_path(self, toy_dir, tmp_path):
        ckpt = tmp_path / "model.cplm"
        cache = tmp_path / "cache.cplc"
        assert main(["train", "--manifest", str(toy_dir / "manifest.json"),
                     "--out", str(ckpt), "--cache-out", str(cache)] + QUICK_TRAIN) == 0
        code = main(["transfer", "--checkpoint", str(ckpt), "--cache", str(cache),
                     "--targets", str(toy_dir / "bank.cplf")])
        assert code == 0


class TestEncoderSelection:
    def test_remote_without_endpoint_is_usage_error(self, toy_dir, tmp_path,
                                                    monkeypatch):
        monkeypatch.delenv("CPLEARN_ENCODER_ENDPOINT", raising=False)
        code = main(["train", "--manifest", str(toy_dir / "manifest.json"),
                     "--out", str(tmp_path / "x.cplm"), "--encoder", "remote"]
                    + QUICK_TRAIN)
        assert code == 2


class TestInspectBank:
    def test_json_dump_bits(self, toy_dir, tmp_path):
        out = tmp_path / "dump.json"
        code = main(["inspect-bank", "--path", str(toy_dir / "bank.cplf"),
                     "--out", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["manifest"]["dataset_name"] == "toyworld"
        rec = payload["records"][0]
        assert len(rec["final_feature_f32_hex"][0]) == 8  # 4 bytes as hex
