import subprocess
import sys

import numpy as np
import pytest

from cytran.cli import main, parse_config, phantom_files
from cytran.data import Volume, load_volume, save_volume
from cytran.registration import RegistrationNet, cascade_register, load_field, warp
from cytran.training import checkpoint_load


@pytest.fixture(scope="module")
def phantoms(tmp_path_factory):
    d = tmp_path_factory.mktemp("ph")
    assert main(["phantom-gen", "--out", str(d), "--count", "3", "--size", "72", "--depth", "2",
                 "--seed", "5", "--misalign", "1.5"]) == 0
    return d


def test_phantom_gen_layout_and_determinism(phantoms, tmp_path):
    assert len(phantom_files(phantoms, "venous")) == 3
    assert (phantoms / "patient_000_field_arterial.cyck").exists()
    v = load_volume(phantoms / "patient_001_venous.cytv")
    assert v.shape == (2, 72, 72) and v.phase == "venous"
    assert main(["phantom-gen", "--out", str(tmp_path), "--count", "3", "--size", "72", "--depth", "2",
                 "--seed", "5", "--misalign", "1.5"]) == 0
    for f in sorted(phantoms.iterdir()):
        assert (tmp_path / f.name).read_bytes() == f.read_bytes()
    np.testing.assert_array_equal(load_field(phantoms / "patient_002_field_venous.cyck").shape, (3, 2, 72, 72))


def test_evaluate_identity_on_equal_volumes(phantoms, tmp_path, capsys):
    src = str(phantoms / "patient_000_native.cytv")
    report = tmp_path / "r.txt"
    assert main(["evaluate", "--identity", "--src", src, "--tgt", src, "--report", str(report)]) == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "slice_index, mae, rmse, ssim"
    assert lines[-1] == "mean, 0.0, 0.0, 1.0"
    assert "mae 0.000000" in capsys.readouterr().out


TINY_CONFIG = """
# desk-sized network for tests
epochs = 1
batch_size = 2
base_width = 2
transformer_channels = 8
heads = 2
head_dim = 4
pointwise_channels = 16
n_blocks = 1
discriminator_width = 4
"""


@pytest.fixture(scope="module")
def trained(phantoms, tmp_path_factory):
    d = tmp_path_factory.mktemp("tr")
    (d / "cfg.txt").write_text(TINY_CONFIG)
    ckpt = d / "model.cyck"
    assert main(["train", "--data", str(phantoms), "--pair", "native:venous", "--config", str(d / "cfg.txt"),
                 "--out", str(ckpt), "--seed", "3"]) == 0
    return ckpt


def test_train_writes_checkpoint_and_log(trained):
    state = checkpoint_load(trained)
    assert state.epoch == 1 and state.phases == ("native", "venous")
    assert state.config.image_size == 72 and state.config.seed == 3
    log = (trained.parent / "model.cyck.log").read_text().splitlines()
    assert log[0] == "epoch, step, l_gan_g, l_gan_f, l_cycle, total"
    assert len(log) == 1 + 3  # 6 native slices, batch 2
    assert len(log[1].split(", ")) == 6


def test_train_is_idempotent(phantoms, trained, tmp_path):
    (tmp_path / "cfg.txt").write_text(TINY_CONFIG)
    again = tmp_path / "model.cyck"
    assert main(["train", "--data", str(phantoms), "--pair", "native:venous", "--config",
                 str(tmp_path / "cfg.txt"), "--out", str(again), "--seed", "3"]) == 0
    assert again.read_bytes() == trained.read_bytes()


def test_translate_and_evaluate_with_checkpoint(phantoms, trained, tmp_path):
    src = phantoms / "patient_000_native.cytv"
    out = tmp_path / "t.cytv"
    assert main(["translate", "--ckpt", str(trained), "--direction", "x2y", "--in", str(src), "--out", str(out)]) == 0
    vol = load_volume(out)
    assert vol.phase == "venous" and vol.shape == (2, 72, 72)
    G = checkpoint_load(trained).G
    np.testing.assert_array_equal(vol.voxels, G.translate(load_volume(src).voxels))
    assert main(["translate", "--ckpt", str(trained), "--direction", "y2x", "--in", str(src), "--out", str(out)]) == 3
    rep = tmp_path / "r.txt"
    assert main(["evaluate", "--ckpt", str(trained), "--src", str(src),
                 "--tgt", str(phantoms / "patient_000_venous.cytv"), "--report", str(rep)]) == 0
    assert rep.read_text().splitlines()[-1].startswith("mean, ")


@pytest.fixture(scope="module")
def reg_model(phantoms, tmp_path_factory):
    path = tmp_path_factory.mktemp("reg") / "reg.cyck"
    assert main(["train-registration", "--data", str(phantoms), "--out", str(path), "--steps", "2",
                 "--width", "4"]) == 0
    return path


def test_register_single_cascade_matches_library(phantoms, reg_model, tmp_path):
    moving, fixed = phantoms / "patient_001_venous.cytv", phantoms / "patient_001_native.cytv"
    out, field = tmp_path / "a.cytv", tmp_path / "f.cyck"
    assert main(["register", "--moving", str(moving), "--fixed", str(fixed), "--model", str(reg_model),
                 "--cascades", "1", "--out", str(out), "--field-out", str(field)]) == 0
    lib = cascade_register(RegistrationNet.load(reg_model), load_volume(moving), load_volume(fixed), 1)
    np.testing.assert_array_equal(load_volume(out).voxels, lib.warped.astype(np.float32))
    np.testing.assert_array_equal(load_field(field), lib.net_field)


def test_register_with_translation(phantoms, reg_model, trained, tmp_path):
    moving, fixed = phantoms / "patient_001_venous.cytv", phantoms / "patient_001_native.cytv"
    out = tmp_path / "a.cytv"
    assert main(["register", "--moving", str(moving), "--fixed", str(fixed), "--model", str(reg_model),
                 "--cascades", "2", "--translate-ckpt", str(trained), "--out", str(out)]) == 0
    assert load_volume(out).phase == "venous"
    arterial = phantoms / "patient_001_arterial.cytv"
    assert main(["register", "--moving", str(arterial), "--fixed", str(fixed), "--model", str(reg_model),
                 "--translate-ckpt", str(trained), "--out", str(out)]) == 3


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["evaluate", "--bogus"])
    assert e.value.code == 1
    assert "usage" in capsys.readouterr().err
    bad = tmp_path / "bad.cytv"
    bad.write_bytes(b"XXXX" + bytes(40))
    rep = str(tmp_path / "r.txt")
    assert main(["evaluate", "--identity", "--src", str(bad), "--tgt", str(bad), "--report", rep]) == 2
    assert main(["evaluate", "--identity", "--src", str(tmp_path / "missing.cytv"), "--tgt", str(bad),
                 "--report", rep]) == 3
    a, b = tmp_path / "a.cytv", tmp_path / "b.cytv"
    save_volume(Volume(np.zeros((2, 16, 16), np.float32)), a)
    save_volume(Volume(np.zeros((3, 16, 16), np.float32)), b)
    assert main(["evaluate", "--identity", "--src", str(a), "--tgt", str(b), "--report", rep]) == 3


def test_numeric_error_exit_code(tmp_path):
    # a checkpoint whose weights are non-finite makes translation fail numerically
    from cytran.training import CyTranState, TrainConfig, checkpoint_save

    st = CyTranState(TrainConfig(image_size=16, base_width=2, transformer_channels=8, heads=1, head_dim=4,
                                 pointwise_channels=8, n_blocks=1, discriminator_width=4))
    st.G.stem.weight.data[...] = np.inf
    checkpoint_save(st, tmp_path / "bad.cyck")
    vol = tmp_path / "v.cytv"
    save_volume(Volume(np.ones((1, 16, 16), np.float32)), vol)
    assert main(["translate", "--ckpt", str(tmp_path / "bad.cyck"), "--direction", "x2y", "--in", str(vol),
                 "--out", str(tmp_path / "o.cytv")]) == 4


def test_config_parsing():
    assert parse_config("a = 1\n# c\n\nb=x # tail\n") == {"a": "1", "b": "x"}
    with pytest.raises(ValueError):
        parse_config("just words")


def test_self_check_subprocess():
    proc = subprocess.run([sys.executable, "-m", "cytran", "self-check"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "PASS parameter-count: 3530369 (expected 3530369)" in proc.stdout
    assert proc.stdout.count("PASS") == proc.stdout.count("\n")
