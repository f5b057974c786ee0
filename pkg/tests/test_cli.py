import json

import numpy as np
import pytest

from earseg import cli
from earseg.checkpoint import Checkpoint
from earseg.config import ConfigError, RunConfig
from earseg.trainer import TrainConfig, train_stage1
from earseg.dataio import load_dataset


def tiny_config(path, **overrides):
    cfg = RunConfig(
        train=TrainConfig(stage1_epochs=2, stage2_epochs=1, channels=8, batch_size=2),
        synth={"n_train": 4, "n_test": 2, "size": 32},
        **overrides,
    )
    return cfg.save(path)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """A synthetic workspace after synth, train, refine and evaluate."""
    root = tmp_path_factory.mktemp("run")
    tiny_config(root / "seed.json")
    out = root / "out"
    assert cli.run(["synth", "--config", str(root / "seed.json"), "--out", str(out)]) == 0
    cfg = str(out / "config.json")
    assert cli.run(["train", "--config", cfg]) == 0
    assert cli.run(["refine", "--config", cfg]) == 0
    assert cli.run(["evaluate", "--config", cfg]) == 0
    return out


def test_synth_writes_datasets_and_config(run_dir):
    cfg = json.loads((run_dir / "config.json").read_text())
    assert len(load_dataset(cfg["train_root"], "generic")) == 4
    assert len(load_dataset(cfg["test_root"], "generic")) == 2


def test_pipeline_artifacts(run_dir):
    assert (run_dir / "checkpoints" / "stage1" / "2.ckpt").is_file()
    assert (run_dir / "checkpoints" / "stage2" / "1.ckpt").is_file()
    assert len(list((run_dir / "cache" / "masks").glob("*_m1.png"))) == 4
    assert len(list((run_dir / "cache" / "errormaps").glob("*_em.png"))) == 4
    for name in ("baseline", "refined"):
        rep = json.loads((run_dir / "reports" / f"{name}.json").read_text())
        assert rep["meta"]["fuse"] is (name == "refined")
        assert len(rep["per_image"]) == 2
        assert (run_dir / "reports" / f"{name}.csv").is_file()
        assert len(list((run_dir / "reports" / "overlays" / name).glob("*.png"))) == 2
    resolved = json.loads((run_dir / "config.resolved.json").read_text())
    assert resolved["command"] == "evaluate"
    header = (run_dir / "logs" / "train.csv").read_text().splitlines()[0]
    assert header == "stage,epoch,step,lce,lhm,lea,total"


def test_refine_rerun_hits_mask_cache(run_dir):
    first = json.loads((run_dir / "logs" / "refine.json").read_text())
    assert first["mask_forward_passes"] == 4 and not first["mask_cache_hit"]
    assert cli.run(["refine", "--config", str(run_dir / "config.json")]) == 0
    again = json.loads((run_dir / "logs" / "refine.json").read_text())
    assert again["mask_forward_passes"] == 0 and again["mask_cache_hit"]


def test_cache_dir_environment_override(run_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("EARSEG_CACHE_DIR", str(tmp_path / "elsewhere"))
    assert cli.run(["refine", "--config", str(run_dir / "config.json"),
                    "--out", str(tmp_path / "o2"),
                    "--checkpoint", str(run_dir / "checkpoints" / "stage1" / "2.ckpt")]) == 0
    assert (tmp_path / "elsewhere" / "masks" / "index.json").is_file()


def test_no_fov_flag_recorded(run_dir, tmp_path):
    out = tmp_path / "nofov"
    ck = run_dir / "checkpoints" / "stage1" / "2.ckpt"
    assert cli.run(["evaluate", "--config", str(run_dir / "config.json"), "--out", str(out),
                    "--checkpoint", str(ck), "--no-fov"]) == 0
    rep = json.loads((out / "reports" / "baseline.json").read_text())
    assert rep["meta"]["fov_restricted"] is False
    assert json.loads((out / "config.resolved.json").read_text())["use_fov"] is False


def test_predict_writes_masks(run_dir):
    assert cli.run(["predict", "--config", str(run_dir / "config.json")]) == 0
    pngs = sorted((run_dir / "predictions" / "refined").glob("*.png"))
    assert len(pngs) == 2


def test_zero_epochs_saves_initial_weights(run_dir, tmp_path):
    out = tmp_path / "zero"
    assert cli.run(["train", "--config", str(run_dir / "config.json"), "--out", str(out),
                    "--epochs", "0"]) == 0
    saved = Checkpoint.load(out / "checkpoints" / "stage1" / "0.ckpt")
    cfg = RunConfig.load(run_dir / "config.json")
    samples = load_dataset(cfg.train_root, "generic")
    expected = train_stage1(samples, TrainConfig(**{**cfg.train.to_dict(), "stage1_epochs": 0}))
    assert saved.to_bytes() == expected.to_bytes()


def test_folds_runs_crossval(run_dir, tmp_path, capsys):
    out = tmp_path / "cv"
    assert cli.run(["evaluate", "--config", str(run_dir / "config.json"), "--out", str(out),
                    "--folds", "2"]) == 0
    res = json.loads((out / "reports" / "crossval.json").read_text())
    assert len(res["folds"]) == 2 and set(res["mean"]) == {"baseline", "refined"}
    assert "mean" in capsys.readouterr().out


# failure paths

def test_missing_dataset_exits_2(tmp_path, capsys):
    code = cli.run(["train", "--train-root", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "does not exist" in capsys.readouterr().err


def test_empty_dataset_exits_2(tmp_path):
    (tmp_path / "empty").mkdir()
    assert cli.run(["train", "--train-root", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2


def test_too_many_folds_exits_2(run_dir, tmp_path):
    assert cli.run(["crossval", "--config", str(run_dir / "config.json"), "--out", str(tmp_path),
                    "--folds", "9"]) == 2


def test_refine_without_stage1_exits_2(run_dir, tmp_path, capsys):
    assert cli.run(["refine", "--config", str(run_dir / "config.json"), "--out", str(tmp_path)]) == 2
    assert "stage-1 checkpoint" in capsys.readouterr().err


def test_corrupt_checkpoint_exits_3(run_dir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    assert cli.run(["evaluate", "--config", str(run_dir / "config.json"), "--out", str(tmp_path),
                    "--checkpoint", str(bad)]) == 3


def test_invalid_fusion_weights_exit_2(tmp_path):
    cfg = json.loads(RunConfig().to_json())
    cfg["train"]["lam"] = 0.9
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert cli.run(["train", "--config", str(tmp_path / "c.json")]) == 2


def test_divergence_exits_3_and_saves_checkpoint(run_dir, tmp_path, monkeypatch):
    import earseg.trainer as trainer

    monkeypatch.setattr(trainer, "ce_loss", lambda l, g: (float("nan"), np.zeros_like(l)))
    out = tmp_path / "div"
    assert cli.run(["train", "--config", str(run_dir / "config.json"), "--out", str(out)]) == 3
    assert (out / "checkpoints" / "diverged.ckpt").is_file()


# config

def test_config_round_trip(tmp_path):
    cfg = RunConfig(seed=7, folds=3, use_fov=False)
    back = RunConfig.load(cfg.save(tmp_path / "c.json"))
    assert back == cfg and back.train.seed == 7


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys"):
        RunConfig.from_dict({"bogus": 1})


def test_epochs_flag_targets_the_right_stage():
    args = cli.build_parser().parse_args(["refine", "--epochs", "3"])
    assert cli.resolve_config(args).train.stage2_epochs == 3
    args = cli.build_parser().parse_args(["train", "--epochs", "3", "--seed", "5"])
    cfg = cli.resolve_config(args)
    assert cfg.train.stage1_epochs == 3 and cfg.train.seed == 5


def test_stage1_epoch_default_follows_layout(tmp_path):
    parse = cli.build_parser().parse_args
    assert cli.resolve_config(parse(["train", "--layout", "stare"])).train.stage1_epochs == 40
    assert cli.resolve_config(parse(["train", "--layout", "drive"])).train.stage1_epochs == 50
    assert cli.resolve_config(parse(["train", "--layout", "stare", "--epochs", "7"])).train.stage1_epochs == 7
    path = tiny_config(tmp_path / "c.json", layout="stare")
    assert cli.resolve_config(parse(["train", "--config", str(path)])).train.stage1_epochs == 2
