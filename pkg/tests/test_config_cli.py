import json

import numpy as np
import pytest

from sbssl import checkpoint, cli
from sbssl import config as C
from sbssl.data import Volume, load_split, write_npy
from sbssl.finetune import load_model


class TestConfig:
    def test_defaults_validate(self):
        cfg = C.resolve({}, env={})
        assert cfg["seed"] == 0 and cfg["finetune"]["ensemble"] == 5
        assert cfg["pretrain"]["wd_start"] == 0.04 and cfg["pretrain"]["wd_end"] == 0.4

    def test_preset(self):
        cfg = C.resolve({"model": {"preset": "vit-s"}}, env={})
        assert (cfg["model"]["embed_dim"], cfg["model"]["depth"], cfg["model"]["heads"]) == (384, 12, 6)

    def test_preset_explicit_field_wins(self):
        cfg = C.resolve({"model": {"preset": "vit-nano", "image_size": 32, "patch_size": 8}}, env={})
        assert cfg["model"]["image_size"] == 32 and cfg["model"]["embed_dim"] == 64

    def test_unknown_preset(self):
        with pytest.raises(C.ConfigError):
            C.resolve({"model": {"preset": "vit-xxl"}}, env={})

    def test_unknown_key(self):
        with pytest.raises(C.ConfigError, match="pretrain.epoch"):
            C.resolve({"pretrain": {"epoch": 3}}, env={})

    def test_type_checked(self):
        with pytest.raises(C.ConfigError):
            C.resolve({"pretrain": {"epochs": "ten"}}, env={})
        with pytest.raises(C.ConfigError):
            C.resolve({"finetune": {"oversample": 1}}, env={})

    def test_value_checked(self):
        with pytest.raises(C.ConfigError):
            C.resolve({"data": {"synth": {"positive_rate": 1.5}}}, env={})

    def test_precedence(self):
        cfg = C.resolve({"seed": 1}, [("seed", 3)], env={C.SEED_ENV: "2"})
        assert cfg["seed"] == 3
        assert C.resolve({"seed": 1}, env={C.SEED_ENV: "2"})["seed"] == 2
        with pytest.raises(C.ConfigError):
            C.resolve({}, env={C.SEED_ENV: "x"})

    def test_parse_override(self):
        assert C.parse_override("pretrain.epochs=20") == ("pretrain.epochs", 20)
        assert C.parse_override("data.root=some/dir") == ("data.root", "some/dir")
        assert C.parse_override("pretrain.blocks=[1,2]") == ("pretrain.blocks", [1, 2])
        with pytest.raises(C.ConfigError):
            C.parse_override("novalue")

    def test_builders_carry_seed(self):
        cfg = C.resolve({"seed": 9}, env={})
        assert C.pretrain_config(cfg).seed == 9 and C.synth_spec(cfg).seed == 9
        assert C.finetune_config(cfg, member=2).member == 2

    def test_dump_bit_reproducible(self, tmp_path):
        C.dump(C.resolve({"seed": 4}, env={}), tmp_path / "a.json")
        C.dump(C.resolve({"seed": 4}, env={}), tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert C.resolve(C.load(tmp_path / "a.json"), env={}) == C.resolve({"seed": 4}, env={})


TINY = {
    "data": {"synth": {"n_train": 10, "n_valid": 6, "f_min": 3, "f_max": 4, "size": 16}},
    "model": {"embed_dim": 8, "depth": 2, "heads": 2, "image_size": 16, "patch_size": 8},
    "pretrain": {"epochs": 2, "triptych_every": 1, "triptych_count": 2, "checkpoint_every": 1},
    "finetune": {"epochs": 1, "ensemble": 2},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(C.SEED_ENV, raising=False)
    (tmp_path / "cfg.json").write_text(json.dumps(TINY))
    return tmp_path


def run(command, *argv):
    return cli.main([command, "--config", "cfg.json", *argv])


@pytest.fixture
def pipeline(workdir):
    assert run("synth", "--data", "d") == 0
    assert run("pretrain", "--data", "d", "--out", "pre") == 0
    assert run("finetune", "--data", "d", "--checkpoint", "pre/pretrain.ckpt", "--out", "ft") == 0
    return workdir


class TestSynthCommand:
    def test_writes_dataset(self, workdir, capsys):
        assert run("synth", "--data", "d") == 0
        assert len(list((workdir / "d" / "train" / "sagittal").glob("*.npy"))) == 10
        assert "train: 10 exams" in capsys.readouterr().out
        saved = json.loads((workdir / "d" / "config.json").read_text())
        assert saved["data"]["root"] == "d"

    def test_same_seed_same_bytes(self, workdir):
        run("synth", "--out", "a")
        run("synth", "--out", "b")
        for f in (workdir / "a").rglob("*.npy"):
            assert f.read_bytes() == (workdir / "b" / f.relative_to(workdir / "a")).read_bytes()

    def test_env_seed(self, workdir, monkeypatch):
        run("synth", "--out", "a")
        monkeypatch.setenv(C.SEED_ENV, "7")
        run("synth", "--out", "b")
        assert json.loads((workdir / "b" / "config.json").read_text())["seed"] == 7
        assert (workdir / "a/train/sagittal/0000.npy").read_bytes() != (workdir / "b/train/sagittal/0000.npy").read_bytes()

    def test_non_empty_needs_force(self, workdir):
        assert run("synth", "--out", "a") == 0
        assert run("synth", "--out", "a") == cli.EXIT_CONFIG
        assert run("synth", "--out", "a", "--force") == 0

    def test_bad_rate(self, workdir):
        assert run("synth", "--set", "data.synth.positive_rate=1.5") == cli.EXIT_CONFIG

    def test_bad_config_file(self, workdir):
        assert cli.main(["synth", "--config", "missing.json"]) == cli.EXIT_CONFIG
        (workdir / "bad.json").write_text("{")
        assert cli.main(["synth", "--config", "bad.json"]) == cli.EXIT_CONFIG


class TestPipeline:
    def test_pretrain_outputs(self, pipeline):
        pre = pipeline / "pre"
        assert {"pretrain.ckpt", "last.ckpt", "loss.csv", "config.json"} <= {p.name for p in pre.iterdir()}
        assert (pre / "triptych_epoch0001.png").read_bytes()[:4] == b"\x89PNG"
        assert len((pre / "loss.csv").read_text().splitlines()) == 3

    def test_final_triptych_when_interval_exceeds_run(self, pipeline):
        assert run("pretrain", "--data", "d", "--out", "pre5", "--set", "pretrain.triptych_every=5") == 0
        assert [f.name for f in (pipeline / "pre5").glob("triptych_*.png")] == ["triptych_epoch0002.png"]

    def test_triptych_layout(self, pipeline):
        from PIL import Image

        img = np.asarray(Image.open(pipeline / "pre" / "triptych_epoch0002.png"))
        scale = 128 // 16
        assert img.shape == (2 * 16 * scale, 3 * 16 * scale)

    def test_finetune_outputs(self, pipeline):
        ft = pipeline / "ft"
        manifest = json.loads((ft / "ensemble.json").read_text())
        assert manifest["members"] == ["member0.model", "member1.model"]
        model, meta = load_model(ft / "member0.model")
        assert meta["config"]["finetune"]["checkpoint"] == "pre/pretrain.ckpt"
        assert (ft / "member0_metrics.csv").read_text().startswith("epoch,train_loss,lr,wd,val_accuracy,val_auc")

    def test_eval(self, pipeline):
        assert run("eval", "--data", "d", "--models", "ft", "--out", "ev") == 0
        ev = pipeline / "ev"
        rows = (ev / "predictions.csv").read_text().splitlines()
        assert rows[0] == "exam_id,probability,label" and len(rows) == 7
        head, vals = (ev / "metrics.csv").read_text().splitlines()
        assert head.split(",")[:3] == ["members", "exams", "threshold"] and vals.startswith("2,6,0.5,")
        assert (ev / "roc.csv").read_text().splitlines()[-1].startswith("auc,")

    def test_eval_single_model_file(self, pipeline):
        assert run("eval", "--data", "d", "--models", "ft/member1.model", "--out", "ev1") == 0
        assert (pipeline / "ev1" / "metrics.csv").read_text().splitlines()[1].startswith("1,")

    def test_eval_missing_model(self, pipeline):
        assert run("eval", "--data", "d", "--models", "ft/member9.model", "--out", "ev") == cli.EXIT_DATA

    def test_attn_deterministic(self, pipeline):
        assert run("attn", "--data", "d", "--model", "ft", "--exam", "v0000", "--mid", "--out", "a1") == 0
        assert run("attn", "--data", "d", "--model", "ft", "--exam", "v0000", "--mid", "--out", "a2") == 0
        pngs = sorted((pipeline / "a1").glob("*.png"))
        assert len(pngs) == 1
        assert pngs[0].read_bytes() == (pipeline / "a2" / pngs[0].name).read_bytes()
        rec = json.loads(pngs[0].with_suffix(".json").read_text())
        assert rec["normalisation"]["method"] == "min-max" and len(rec["grid"]) == 2

    def test_attn_slice_out_of_range(self, pipeline):
        assert run("attn", "--data", "d", "--model", "ft", "--exam", "v0000", "--slice", "9",
                   "--out", "a3") == cli.EXIT_CONFIG

    def test_finetune_scratch(self, pipeline):
        assert run("finetune", "--data", "d", "--scratch", "--ensemble", "1", "--out", "sc") == 0
        assert json.loads((pipeline / "sc" / "ensemble.json").read_text())["members"] == ["member0.model"]

    def test_finetune_architecture_mismatch(self, pipeline):
        rc = run("finetune", "--data", "d", "--checkpoint", "pre/pretrain.ckpt", "--out", "mm",
                 "--set", "model.embed_dim=16")
        assert rc == cli.EXIT_CONFIG

    def test_finetune_needs_source(self, pipeline):
        assert run("finetune", "--data", "d", "--out", "x") == cli.EXIT_CONFIG
        assert run("finetune", "--data", "d", "--checkpoint", "nope.ckpt", "--out", "x") == cli.EXIT_DATA


def test_resume_split_equals_unsplit(workdir):
    from sbssl.pretrain import pretrain, save_pretrain_checkpoint

    run("synth", "--data", "d")
    assert run("pretrain", "--data", "d", "--out", "full", "--epochs", "3") == 0
    cfg = C.resolve({**TINY, "data": {**TINY["data"], "root": "d"}}, [("pretrain.epochs", 3)], env={})
    vols = load_split("d", "train")

    def stop(result):
        if result.epoch == 1:
            save_pretrain_checkpoint(workdir / "e1.ckpt", result, cfg)

    pretrain(vols, C.encoder_config(cfg), C.pretrain_config(cfg), on_epoch=stop)
    assert run("pretrain", "--data", "d", "--out", "part", "--epochs", "3", "--resume", "e1.ckpt") == 0
    assert (workdir / "part" / "loss.csv").read_text() == (workdir / "full" / "loss.csv").read_text()
    _, a = checkpoint.load(workdir / "part" / "pretrain.ckpt")
    _, b = checkpoint.load(workdir / "full" / "pretrain.ckpt")
    assert a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_pretrain_missing_data(workdir):
    assert run("pretrain", "--data", "nowhere", "--out", "p") == cli.EXIT_DATA


def test_pretrain_empty_data_dir(workdir):
    (workdir / "empty").mkdir()
    assert run("pretrain", "--data", "empty", "--out", "p") == cli.EXIT_DATA


def test_non_finite_exit_code(workdir):
    run("synth", "--data", "d")
    bad = workdir / "d" / "train" / "sagittal" / "0000.npy"
    write_npy(Volume("0000", np.full((3, 16, 16), np.nan, np.float32)), bad)
    assert run("pretrain", "--data", "d", "--out", "p") == cli.EXIT_NUMERIC


@pytest.mark.parametrize("f,expected", [(17, 8), (1, 0), (4, 2)])
def test_pick_mid(f, expected):
    assert cli.pick_slice(f, mid=True) == expected


def test_pick_slice_range():
    assert cli.pick_slice(5, 4) == 4
    with pytest.raises(cli.UsageError):
        cli.pick_slice(5, 5)
    with pytest.raises(cli.UsageError):
        cli.pick_slice(5, -1)
