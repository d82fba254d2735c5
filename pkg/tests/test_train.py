import json
import math

import numpy as np
import pytest

from mvcc.errors import ConfigError, TrainingError
from mvcc.model import MVCCModel
from mvcc.numerics import load_checkpoint
from mvcc.train import EpochRecord, RunConfig, TrainLog, train

SMALL_MODEL = {
    "channels": 16, "heads": 2, "enc_blocks": 1, "dec_layers": 1, "dec_width": 16, "lora_rank": 2,
}


def run_cfg(dataset, out, **kw):
    return RunConfig.from_dict({"dataset": str(dataset), "out_dir": str(out), "epochs": 2, "batch_size": 8,
                                "figures": False, "model": SMALL_MODEL, **kw})


class TestTrainLog:
    def test_best_epoch_earliest_tie(self):
        log = TrainLog([EpochRecord(1, 2.0, 10.0), EpochRecord(2, 1.5, 30.0), EpochRecord(3, 1.2, 30.0)])
        assert log.best_epoch == 2

    def test_empty(self):
        assert TrainLog().best_epoch is None

    def test_jsonl_roundtrip(self):
        log = TrainLog([EpochRecord(1, 2.0, 10.0), EpochRecord(2, 1.5, 5.0)])
        back = TrainLog.from_jsonl(log.to_jsonl())
        assert back == log
        assert json.loads(log.to_jsonl().splitlines()[-1]) == {"best_epoch": 1}


class TestRunConfig:
    def test_minimal(self):
        cfg = RunConfig.from_dict({"dataset": "x"})
        assert (cfg.lr, cfg.epochs, cfg.batch_size, cfg.mask_source) == (3e-4, 20, 16, "oracle")

    def test_flat_model_fields(self):
        assert RunConfig.from_dict({"dataset": "x", "channels": 32}).model["channels"] == 32

    @pytest.mark.parametrize(
        "bad",
        [{}, {"dataset": "x", "mask_source": "magic"}, {"dataset": "x", "bogus": 1}, {"dataset": "x", "lr": 0},
         {"dataset": "x", "mask_source": "file"}, {"dataset": "x", "model": {"depth": 3}}],
    )
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)

    def test_file_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.from_file(tmp_path / "none.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError):
            RunConfig.from_file(tmp_path / "bad.json")


class TestTraining:
    def test_smoke_and_frozen_base(self, small_dataset, tmp_path):
        res = train(run_cfg(small_dataset, tmp_path))
        assert math.isfinite(res.final_loss)
        assert len(res.log.records) == 2
        model, meta = MVCCModel.load(res.checkpoint)
        assert meta["best_epoch"] == res.log.best_epoch
        fresh = MVCCModel(model.cfg, seed=0)
        for name, t in fresh.encoder.items():
            assert model.encoder[name].data.tobytes() == t.data.tobytes(), name
        stored = load_checkpoint(res.checkpoint)
        assert any(k.startswith("lora.") for k in stored)
        assert (tmp_path / "train_log.jsonl").exists() and (tmp_path / "test_report.json").exists()

    def test_deterministic(self, small_dataset, tmp_path):
        a = train(run_cfg(small_dataset, tmp_path / "a"))
        b = train(run_cfg(small_dataset, tmp_path / "b"))
        assert a.final_loss == b.final_loss
        assert (tmp_path / "a/model.ckpt").read_bytes() == (tmp_path / "b/model.ckpt").read_bytes()
        assert (tmp_path / "a/train_log.jsonl").read_bytes() == (tmp_path / "b/train_log.jsonl").read_bytes()

    def test_seed_changes_run(self, small_dataset, tmp_path):
        a = train(run_cfg(small_dataset, tmp_path / "a", epochs=1))
        b = train(run_cfg(small_dataset, tmp_path / "b", epochs=1, seed=1))
        assert a.final_loss != b.final_loss

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_aborts_with_context(self, small_dataset, tmp_path):
        with pytest.raises(TrainingError, match="epoch 1"):
            train(run_cfg(small_dataset, tmp_path, lr=float("inf")))

    def test_mask_sources_run(self, small_dataset, tmp_path):
        for source in ("none", "baseline"):
            res = train(run_cfg(small_dataset, tmp_path / source, epochs=1, mask_source=source))
            assert np.isfinite(res.final_loss)

    def test_validation_before_writing(self, small_dataset, tmp_path):
        with pytest.raises(ConfigError):
            train(run_cfg(small_dataset, tmp_path / "out", model={**SMALL_MODEL, "image_size": 32, "patch": 8}))
        assert not (tmp_path / "out").exists()
