import csv
import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from scaler import cli
from scaler import trainer as trainer_mod
from scaler.autodiff import NonFiniteError
from scaler.metrics import CSV_COLUMNS
from scaler.synthdata import read_array, read_dataset, write_array

TINY_CFG = """\
# tiny desk run
stage0_epochs = 1
aux_samples = 4
stage1_epochs = 4
stage2_epochs = 1
stage3_alternations = 2   # two Phase I / Phase II rounds
K = 2
batch_size = 8
lr = 3e-3
generalist_lr = 1e-3
eta = 0.95
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "d"
    assert run("gen-data", "--out", d, "--n", 16, "--n-test", 8, "--size", 16, "--seed", 3,
               "--contrast", 0.5) == 0
    return d


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text(TINY_CFG)
    return p


@pytest.fixture(scope="module")
def trained(dataset, config, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "a"
    assert run("train", "--config", config, "--data", dataset, "--out", out) == 0
    return out


def dirs_equal(a: Path, b: Path) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(dirs_equal(a / s, b / s) for s in cmp.common_dirs)


# ------------------------------------------------------------- config

def test_config_parsing_and_echo():
    rc = cli.parse_config("lr = 0.5  # comment\nuse_phase2 = false\naug_scales = 1.0, 2.0\n"
                          "generalist_lr = none\nscene_size = 16\n")
    assert rc.train.lr == 0.5 and rc.train.use_phase2 is False
    assert rc.train.aug_scales == (1.0, 2.0) and rc.train.generalist_lr is None
    assert rc.scene == {"size": 16}
    again = cli.parse_config(rc.echo())
    assert again == rc


@pytest.mark.parametrize("text", ["bogus = 1", "lr 0.1", "lr = fast", "use_plf = maybe",
                                  "hard_entropy = 0.1", "oracle_flip_rate = 2"])
def test_bad_config_is_usage_error(text):
    with pytest.raises(cli.CliError) as exc:
        cli.parse_config(text)
    assert exc.value.code == cli.EXIT_USAGE


def test_config_unknown_key_exit_code(dataset, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("bogus = 1\n")
    assert run("train", "--config", bad, "--data", dataset, "--out", tmp_path / "o") == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_config_file_is_io_error(dataset, tmp_path):
    assert run("train", "--config", tmp_path / "nope", "--data", dataset, "--out", tmp_path) == 3


# ------------------------------------------------------------- gen-data

def test_gen_data_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--out", tmp_path / name, "--n", 6, "--n-test", 2, "--size", 32,
                   "--seed", 7) == 0
    assert dirs_equal(tmp_path / "a", tmp_path / "b")


def test_gen_data_contrast_controls_gap(tmp_path):
    gaps = {}
    for c in (0.0, 1.0):
        assert run("gen-data", "--out", tmp_path / str(c), "--n", 20, "--n-test", 0, "--size", 32,
                   "--contrast", c) == 0
        samples, _ = read_dataset(tmp_path / str(c))
        gaps[c] = np.mean([abs(s.image[s.mask > 0.5].mean() - s.image[s.mask < 0.5].mean())
                           for s in samples])
    assert gaps[1.0] >= 0.5 > 0.1 > gaps[0.0]


def test_gen_data_aux_distribution(tmp_path):
    assert run("gen-data", "--out", tmp_path / "aux", "--n", 4, "--size", 32, "--aux-distribution") == 0
    _, man = read_dataset(tmp_path / "aux")
    assert man.extra["contrast_range"] == [0.6, 1.0]


def test_gen_data_usage_errors(tmp_path, capsys):
    assert run("gen-data", "--n", 3) == 2
    assert "usage" in capsys.readouterr().err
    assert run("gen-data", "--out", tmp_path / "x", "--contrast", 3) == 2
    assert run("gen-data", "--out", tmp_path / "x", "--size", 30) == 2


def test_gen_data_unwritable_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("gen-data", "--out", blocker / "sub", "--n", 2, "--size", 32) == 3


# ---------------------------------------------------------------- train

def test_train_outputs(trained):
    for name in ("metrics.json", "config.txt", "train_log.jsonl", "report_test_student.csv"):
        assert (trained / name).exists()
    doc = json.loads((trained / "metrics.json").read_text())
    assert set(doc) == {"train", "test", "stage1"}
    assert set(doc["test"]) == {"student", "teacher", "generalist"}
    assert set(doc["test"]["student"]) == {"mae", "f_beta", "e_phi", "s_alpha"}
    assert cli.parse_config((trained / "config.txt").read_text()).train.stage1_epochs == 4


def test_train_beats_untrained_model(trained, dataset):
    from scaler.models import ModelBundle
    samples, man = read_dataset(dataset)
    untrained = trainer_mod.evaluate_model(ModelBundle.create(0), samples, man.test_ids, "student")
    doc = json.loads((trained / "metrics.json").read_text())
    assert doc["test"]["student"]["mae"] < untrained.mae


def test_train_is_byte_reproducible(trained, dataset, config, tmp_path):
    assert run("train", "--config", config, "--data", dataset, "--out", tmp_path / "b") == 0
    assert (tmp_path / "b" / "metrics.json").read_bytes() == (trained / "metrics.json").read_bytes()


def test_rerun_into_same_directory_is_idempotent(trained, dataset, config, tmp_path):
    out = tmp_path / "same"
    for _ in range(2):
        assert run("train", "--config", config, "--data", dataset, "--out", out) == 0
    assert (out / "train_log.jsonl").read_bytes() == (trained / "train_log.jsonl").read_bytes()


def test_resume_mid_stage3_via_cli(trained, dataset, config, tmp_path):
    out = tmp_path / "r"
    assert run("train", "--config", config, "--data", dataset, "--out", out) == 0
    (out / "metrics.json").unlink()
    assert run("train", "--config", config, "--data", dataset, "--out", out,
               "--resume", out / "checkpoints" / "alt_001") == 0
    assert (out / "metrics.json").read_bytes() == (trained / "metrics.json").read_bytes()


def test_semi_fraction_honoured():
    from scaler.synthdata import SplitManifest
    man = SplitManifest(list(range(160)), list(range(160)), 1.0)
    cfg = cli.parse_config("mode = semi\nlabeled_fraction = 0.125\n").train
    assert len(cli.train_manifest(cfg, man).labeled) == 20


def test_numeric_failure_exit_code(dataset, config, tmp_path, monkeypatch, capsys):
    def boom(self):
        self.state.step = 5
        raise NonFiniteError("non-finite loss at phase1, step 5")

    monkeypatch.setattr(trainer_mod.Trainer, "run", boom)
    assert run("train", "--config", config, "--data", dataset, "--out", tmp_path) == 4
    assert "step 5" in capsys.readouterr().err
    last = json.loads((tmp_path / "train_log.jsonl").read_text().splitlines()[-1])
    assert last["step"] == 5 and "error" in last


def test_scene_mismatch_exit_code(dataset, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("scene_size = 64\n")
    assert run("train", "--config", cfg, "--data", dataset, "--out", tmp_path / "o") == 5


def test_annotation_mismatch_exit_code(dataset, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("annotation = scribble\n")
    assert run("train", "--config", cfg, "--data", dataset, "--out", tmp_path / "o") == 5


def test_missing_dataset_is_io_error(config, tmp_path):
    assert run("train", "--config", config, "--data", tmp_path / "none", "--out", tmp_path) == 3


# ----------------------------------------------------------------- eval

def test_eval_models_differ(trained, dataset, tmp_path, capsys):
    ckpt = trained / "checkpoints" / "stage3"
    reports = {}
    for m in ("student", "teacher"):
        capsys.readouterr()
        assert run("eval", "--checkpoint", ckpt, "--data", dataset, "--model", m,
                   "--out", tmp_path) == 0
        reports[m] = json.loads(capsys.readouterr().out)["mean"]
    assert reports["student"] != reports["teacher"]
    rows = list(csv.reader((tmp_path / "report_teacher.csv").read_text().splitlines()))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 9


def test_eval_oracle_checkpoint(trained, dataset, monkeypatch, capsys):
    samples, _ = read_dataset(dataset)
    monkeypatch.setattr(trainer_mod, "model_predictions",
                        lambda bundle, s, ids, model, mode="weak": [s[i].mask for i in ids])
    assert run("eval", "--checkpoint", trained / "checkpoints" / "stage3", "--data", dataset) == 0
    mean = json.loads(capsys.readouterr().out)["mean"]
    assert mean["mae"] == 0.0 and mean["f_beta"] == 1.0
    assert mean["e_phi"] == pytest.approx(1.0, abs=1e-12)
    assert mean["s_alpha"] == pytest.approx(1.0, abs=1e-12)


def test_eval_corrupt_checkpoint(trained, dataset, tmp_path):
    import shutil
    ckpt = tmp_path / "ckpt"
    shutil.copytree(trained / "checkpoints" / "stage3", ckpt)
    blob = ckpt / "student.bin"
    blob.write_bytes(blob.read_bytes()[:-7])
    assert run("eval", "--checkpoint", ckpt, "--data", dataset) == 5


def test_eval_architecture_mismatch(trained, dataset, tmp_path):
    import shutil
    ckpt = tmp_path / "ckpt"
    shutil.copytree(trained / "checkpoints" / "stage3", ckpt)
    arch = json.loads((ckpt / "arch.json").read_text())
    arch["student"]["widths"] = [4] + arch["student"]["widths"][1:]
    (ckpt / "arch.json").write_text(json.dumps(arch))
    assert run("eval", "--checkpoint", ckpt, "--data", dataset) == 5


def test_eval_missing_checkpoint(dataset, tmp_path):
    assert run("eval", "--checkpoint", tmp_path / "none", "--data", dataset) == 3


# --------------------------------------------------------------- ablate

def test_ablate_unknown_axis(dataset, config, tmp_path):
    assert run("ablate", "--config", config, "--data", dataset, "--out", tmp_path,
               "--axes", "no-phase2,no-magic") == 2


def test_ablate_table(dataset, config, trained, tmp_path):
    assert run("ablate", "--config", config, "--data", dataset, "--out", tmp_path,
               "--axes", "no-phase2") == 0
    rows = list(csv.DictReader((tmp_path / "table.csv").read_text().splitlines()))
    assert [r["run"] for r in rows] == ["full", "no-phase2"]
    full, axis = rows
    for k in ("mae", "f_beta", "e_phi", "s_alpha", "generalist_mae"):
        assert float(full[f"d_{k}"]) == 0.0
        assert float(axis[f"d_{k}"]) == pytest.approx(float(axis[k]) - float(full[k]), abs=1e-15)
    log = [json.loads(ln) for ln in (tmp_path / "no-phase2" / "train_log.jsonl").read_text().splitlines()]
    assert all(r["phase"] != "II" for r in log)
    # the full arm is the same run as plain train
    assert (tmp_path / "full" / "metrics.json").read_bytes() == (trained / "metrics.json").read_bytes()


def test_axes_cover_every_switch():
    assert set(cli.AXES) == {"no-plf", "no-entropy-weight", "no-uncertainty-weight", "no-phase2",
                             "lai-weak-weak", "lnr-with-refine", "no-stage1", "no-stage2",
                             "trust-from-plf"}
    fields = cli.TrainConfig.field_names()
    assert all(k in fields for o in cli.AXES.values() for k in o)


# --------------------------------------------------------- refine-masks

@pytest.fixture
def masks(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        d.mkdir()
    write_array(a / "half.bin", np.full((4, 4), 0.5))
    write_array(a / "low.bin", np.full((4, 4), 0.05))
    write_array(b / "half.bin", np.full((4, 4), 0.9))
    write_array(b / "low.bin", np.full((4, 4), 0.05))
    return a, b


def test_refine_uncertainty_and_trust(masks, tmp_path):
    a, _ = masks
    assert run("refine-masks", "--masks", a, "--op", "uncertainty", "--out", tmp_path / "u") == 0
    assert np.all(read_array(tmp_path / "u" / "half.bin") == 0.0)
    assert run("refine-masks", "--masks", a, "--op", "trust", "--out", tmp_path / "t") == 0
    assert np.all(read_array(tmp_path / "t" / "low.bin") == 1.0)
    assert np.all(read_array(tmp_path / "t" / "half.bin") == 0.0)


def test_refine_entropy_csv(masks, tmp_path):
    a, _ = masks
    assert run("refine-masks", "--masks", a, "--op", "entropy", "--out", tmp_path / "e") == 0
    rows = dict(list(csv.reader((tmp_path / "e" / "entropy.csv").read_text().splitlines()))[1:])
    assert float(rows["half.bin"]) == 1.0


def test_refine_consensus_and_fuse(masks, tmp_path):
    a, b = masks
    assert run("refine-masks", "--masks", a, "--masks", b, "--op", "consensus", "--out", tmp_path / "c") == 0
    np.testing.assert_allclose(read_array(tmp_path / "c" / "half.bin"), 0.7, rtol=0, atol=1e-15)
    assert run("refine-masks", "--masks", a, "--masks", b, "--op", "fuse", "--out", tmp_path / "f") == 0
    np.testing.assert_allclose(read_array(tmp_path / "f" / "low.bin"), 0.05, rtol=0, atol=1e-15)


def test_refine_consensus_needs_two_dirs(masks, tmp_path):
    a, _ = masks
    assert run("refine-masks", "--masks", a, "--op", "consensus", "--out", tmp_path / "c") == 2
    assert run("refine-masks", "--masks", a, "--masks", a, "--masks", a, "--op", "consensus",
               "--out", tmp_path / "c") == 2


def test_refine_malformed_file_named(masks, tmp_path, capsys):
    a, _ = masks
    (a / "broken.bin").write_bytes(b"garbage")
    assert run("refine-masks", "--masks", a, "--op", "trust", "--out", tmp_path / "t") == 3
    assert "broken.bin" in capsys.readouterr().err
