import json

import numpy as np
import pytest
import torch

from mrir.cli import main
from mrir.config import Config, load_config
from mrir.degrade import DegradationParams, synthesize_pair
from mrir.errors import ConfigError
from mrir.evaluate import StubRestorer, run_eval
from mrir.imgio import load_image, save_image
from mrir.model import build_model, load_checkpoint, make_train_item, save_checkpoint

from conftest import make_image, micro_cfg


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = Config()
        again = load_config(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()
        assert again.fingerprint() == cfg.fingerprint()

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unet.widthz"):
            load_config({"unet": {"widthz": [1, 2]}})

    def test_width_divisibility_validated(self):
        with pytest.raises(ConfigError, match="widths"):
            load_config({"unet": {"scales": 2, "widths": [7, 12]}})

    def test_lre_on_off_strings(self):
        assert load_config({"sampler": {"lre": "off"}}).sampler.lre is False
        assert load_config({"sampler": {"lre": "on"}}).sampler.lre is True

    def test_paper_defaults_present(self):
        cfg = Config()
        assert cfg.train.lambda_rgb == 0.1
        assert cfg.train.lambda_fft == 0.01
        assert cfg.train.timesteps == 1000
        assert cfg.sampler.steps == 50
        assert cfg.train.lr == 5e-5
        assert cfg.train.batch_size == 32
        assert cfg.conditioning.window == 75
        assert cfg.conditioning.image_tokens == 17
        assert cfg.codec.factor == 8
        assert cfg.degrade.final_scale == 4

    def test_shipped_config_matches_defaults(self):
        shipped = load_config("configs/default.json")
        assert shipped.to_dict() == Config().to_dict()


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path):
        cfg = micro_cfg()
        model = build_model(cfg, seed=5)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, model)
        loaded, loaded_cfg = load_checkpoint(path)
        assert loaded_cfg.to_dict() == cfg.to_dict()
        a = dict(model.named_parameters())
        b = dict(loaded.named_parameters())
        assert a.keys() == b.keys()
        for name in a:
            assert torch.equal(a[name].float(), b[name]), name

    def test_archive_layout(self, tmp_path):
        model = build_model(micro_cfg(), seed=5)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, model)
        with np.load(path) as archive:
            assert "__config__" in archive.files
            params = [k for k in archive.files if k.startswith("param/")]
            assert len(params) == len(list(model.named_parameters()))
            for k in params:
                assert archive[k].dtype == np.dtype("<f4")

    def test_mismatched_checkpoint_rejected(self, tmp_path):
        model = build_model(micro_cfg(), seed=5)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, model)
        with np.load(path) as archive:
            arrays = {k: archive[k] for k in archive.files}
        del arrays[next(k for k in arrays if k.startswith("param/"))]
        np.savez(tmp_path / "broken.npz", **arrays)
        with pytest.raises(ValueError, match="mismatch"):
            load_checkpoint(tmp_path / "broken.npz")


class TestRunEval:
    def make_dirs(self, tmp_path, n=3, size=8, scale=4):
        lq_dir = tmp_path / "lq"
        ref_dir = tmp_path / "ref"
        lq_dir.mkdir()
        ref_dir.mkdir()
        restorer = StubRestorer(scale)
        for i in range(n):
            lq = make_image(40 + i, size)
            save_image(lq_dir / f"img{i}.png", lq)
            # references: the stub output itself for one exact-match case,
            # otherwise an independent image
            if i == 0:
                ref = restorer(load_image(lq_dir / f"img{i}.png"), 0)
            else:
                ref = make_image(90 + i, size * scale)
            save_image(ref_dir / f"img{i}.png", ref)
        return lq_dir, ref_dir

    def test_empty_dir_errors(self, tmp_path):
        (tmp_path / "lq").mkdir()
        (tmp_path / "ref").mkdir()
        with pytest.raises(ValueError, match="no pairs found"):
            run_eval(tmp_path / "lq", tmp_path / "ref", StubRestorer(4), Config())

    def test_stub_restorer_report(self, tmp_path):
        lq_dir, ref_dir = self.make_dirs(tmp_path)
        report = run_eval(lq_dir, ref_dir, StubRestorer(4), Config(), seed=3)
        assert report.aggregates["n_scored"] == 3
        assert report.aggregates["psnr_y_infinite_count"] == 1
        assert report.per_image["img0"]["psnr_y_infinite"] is True
        assert report.per_image["img0"]["psnr_y"] is None
        finite = [v["psnr_y"] for k, v in report.per_image.items() if k != "img0"]
        assert report.aggregates["psnr_y_mean"] == pytest.approx(np.mean(finite), abs=1e-6)

    def test_deterministic_modulo_timestamp(self, tmp_path):
        lq_dir, ref_dir = self.make_dirs(tmp_path)
        a = run_eval(lq_dir, ref_dir, StubRestorer(4), Config(), seed=3).to_dict()
        b = run_eval(lq_dir, ref_dir, StubRestorer(4), Config(), seed=3).to_dict()
        a.pop("generated_at")
        b.pop("generated_at")
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def test_missing_reference_skipped(self, tmp_path):
        lq_dir, ref_dir = self.make_dirs(tmp_path, n=2)
        (ref_dir / "img1.png").unlink()
        report = run_eval(lq_dir, ref_dir, StubRestorer(4), Config(), seed=3)
        assert [s["stem"] for s in report.skipped] == ["img1"]
        assert "img1" not in report.per_image


class TestCli:
    def synth(self, tmp_path, n=2, size=64):
        hq_dir = tmp_path / "hq_src"
        hq_dir.mkdir()
        for i in range(n):
            save_image(hq_dir / f"pic{i}.png", make_image(60 + i, size))
        out_dir = tmp_path / "pairs"
        rc = main(["synth", "--hq-dir", str(hq_dir), "--out-dir", str(out_dir),
                   "--seed", "5", "--scale", "4"])
        assert rc == 0
        return out_dir

    def test_synth_outputs_and_manifest(self, tmp_path):
        out_dir = self.synth(tmp_path)
        manifest = [json.loads(line) for line in (out_dir / "manifest.jsonl").read_text().splitlines()]
        assert len(manifest) == 2
        for entry in manifest:
            lq = load_image(out_dir / "lq" / entry["filename"])
            hq = load_image(out_dir / "hq" / entry["filename"])
            assert lq.shape == (16, 16, 3)
            assert hq.shape == (64, 64, 3)
            # manifest params reproduce the LQ bit-exactly after quantization
            params = DegradationParams.from_dict(entry["params"])
            again = synthesize_pair(hq, params)
            requantized = np.round(np.clip(again.lq, 0, 1) * 255).astype(np.uint8)
            assert np.array_equal(requantized, np.round(lq * 255).astype(np.uint8))

    def test_train_restore_eval_cycle(self, tmp_path):
        out_dir = self.synth(tmp_path)
        cfg_path = tmp_path / "micro.json"
        micro = micro_cfg(train={"batch_size": 2, "lr": 1e-3}, sampler={"steps": 4})
        cfg_path.write_text(micro.to_json(), encoding="utf-8")

        ckpt_dir = tmp_path / "ckpt"
        rc = main(["train", "--config", str(cfg_path), "--data", str(out_dir / "manifest.jsonl"),
                   "--out", str(ckpt_dir), "--steps", "3", "--log-every", "0"])
        assert rc == 0
        assert (ckpt_dir / "final.npz").exists()
        log = [json.loads(l) for l in (ckpt_dir / "loss_log.jsonl").read_text().splitlines()]
        assert len(log) == 3 and all(np.isfinite(e["total"]) for e in log)

        lq_path = out_dir / "lq" / "pic0.png"
        out_png = tmp_path / "restored.png"
        rc = main(["restore", "--ckpt", str(ckpt_dir / "final.npz"), "--lq", str(lq_path),
                   "--out", str(out_png), "--seed", "9", "--steps", "4"])
        assert rc == 0
        restored = load_image(out_png)
        assert restored.shape == (64, 64, 3)

        report_path = tmp_path / "report.json"
        rc = main(["eval", "--lq-dir", str(out_dir / "lq"), "--ref-dir", str(out_dir / "hq"),
                   "--ckpt", str(ckpt_dir / "final.npz"), "--report", str(report_path),
                   "--seed", "1"])
        assert rc == 0
        report = json.loads(report_path.read_text())
        assert report["aggregates"]["n_scored"] == 2
        assert report["schema_version"] == "mrir-eval-1"

    def test_eval_stub_mode(self, tmp_path):
        out_dir = self.synth(tmp_path)
        report_path = tmp_path / "stub_report.json"
        rc = main(["eval", "--lq-dir", str(out_dir / "lq"), "--ref-dir", str(out_dir / "hq"),
                   "--report", str(report_path), "--seed", "1"])
        assert rc == 0
        assert json.loads(report_path.read_text())["aggregates"]["n_scored"] == 2
