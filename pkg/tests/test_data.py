import struct

import numpy as np
import pytest

from cytran.data import (
    FormatError, PhantomSpec, Structure, Volume, generate_phantom_triple, load_volume,
    preprocess, restore_raw, save_volume, split,
)


def test_preprocess_examples():
    assert preprocess(np.full((1, 2, 2), 2024), 1024).voxels[0, 0, 0] == 1.0
    assert not preprocess(np.full((2, 3, 3), -1024), -1024).voxels.any()


def test_preprocess_round_trip_exact_on_stored_integers(rng):
    raw = rng.integers(-2048, 3072, size=(4, 16, 16)).astype(np.float64)
    for intercept in (-1024.0, 0.0, 1024.0, -1000.5):
        assert np.array_equal(restore_raw(preprocess(raw, intercept)), raw)


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 4, 5)))
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 4, 4)), phase="delayed")
    with pytest.raises(ValueError):
        Volume(np.full((1, 2, 2), np.nan))


@pytest.fixture
def volume(rng):
    return Volume(rng.standard_normal((3, 8, 8)).astype(np.float32), -1024.0, 2.5, "arterial")


def test_volume_round_trip(volume, tmp_path):
    path = tmp_path / "v.cytv"
    save_volume(volume, path)
    back = load_volume(path)
    assert back.voxels.tobytes() == volume.voxels.tobytes()
    assert (back.intercept, back.slice_thickness_mm, back.phase) == (-1024.0, 2.5, "arterial")
    save_volume(back, tmp_path / "w.cytv")
    assert (tmp_path / "w.cytv").read_bytes() == path.read_bytes()


def test_volume_header_layout(volume, tmp_path):
    path = tmp_path / "v.cytv"
    save_volume(volume, path)
    buf = path.read_bytes()
    assert buf[:4] == b"CYTV"
    assert struct.unpack_from("<IIIIB", buf, 4) == (1, 3, 8, 8, 2)
    assert struct.unpack_from("<ff", buf, 21) == (-1024.0, 2.5)
    assert len(buf) == 29 + 4 * 3 * 8 * 8
    np.testing.assert_array_equal(np.frombuffer(buf, "<f4", offset=29).reshape(3, 8, 8), volume.voxels)


def _corrupt(volume, tmp_path, fn):
    path = tmp_path / "v.cytv"
    save_volume(volume, path)
    path.write_bytes(fn(bytearray(path.read_bytes())))
    return path


def test_bad_magic(volume, tmp_path):
    path = _corrupt(volume, tmp_path, lambda b: b"XXXX" + b[4:])
    with pytest.raises(FormatError, match="magic") as err:
        load_volume(path)
    assert err.value.offset == 0


def test_bad_version(volume, tmp_path):
    path = _corrupt(volume, tmp_path, lambda b: b[:4] + struct.pack("<I", 7) + b[8:])
    with pytest.raises(FormatError, match="version") as err:
        load_volume(path)
    assert err.value.offset == 4


def test_header_declaring_more_voxels_than_payload(volume, tmp_path):
    path = _corrupt(volume, tmp_path, lambda b: b[:8] + struct.pack("<I", 4) + b[12:])
    with pytest.raises(FormatError, match="truncated"):
        load_volume(path)


@pytest.mark.parametrize("cut", [2, 10, 28, 100])
def test_truncation_anywhere_is_reported(volume, tmp_path, cut):
    path = _corrupt(volume, tmp_path, lambda b: b[:cut])
    with pytest.raises(FormatError) as err:
        load_volume(path)
    assert err.value.offset is not None


def test_trailing_bytes(volume, tmp_path):
    path = _corrupt(volume, tmp_path, lambda b: b + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_volume(path)


def test_bad_phase_tag(volume, tmp_path):
    path = _corrupt(volume, tmp_path, lambda b: b[:20] + b"\x09" + b[21:])
    with pytest.raises(FormatError, match="phase"):
        load_volume(path)


# --------------------------------------------------------------- phantoms

def test_phantom_is_deterministic():
    spec = PhantomSpec(image_size=32, depth=4, noise_sigma=0.02, misalignment=1.5)
    a, b = generate_phantom_triple(spec, 7), generate_phantom_triple(spec, 7)
    for phase in ("native", "venous", "arterial"):
        assert a[phase].voxels.tobytes() == b[phase].voxels.tobytes()
    assert a.fields["venous"].tobytes() == b.fields["venous"].tobytes()
    c = generate_phantom_triple(spec, 8)
    assert c.native.voxels.tobytes() != a.native.voxels.tobytes()


def test_zero_deltas_give_identical_phases():
    spec = PhantomSpec(
        image_size=32, depth=4,
        structures=(Structure((0.5, 0.5, 0.5), (0.4, 0.3, 0.3), 0.1),),
    )
    t = generate_phantom_triple(spec, 0)
    assert t.native.voxels.tobytes() == t.venous.voxels.tobytes() == t.arterial.voxels.tobytes()


def test_contrast_delta_only_inside_structure():
    blob = Structure((0.5, 0.5, 0.5), (0.3, 0.25, 0.25), 0.05, {"venous": 0.3})
    t = generate_phantom_triple(PhantomSpec(image_size=32, depth=6, structures=(blob,)), 0)
    diff = t.venous.voxels.astype(np.float64) - t.native.voxels
    inside = np.isclose(diff, 0.3, atol=1e-6)
    assert inside.any()
    assert np.all(inside | (diff == 0))
    assert not (t.arterial.voxels - t.native.voxels).any()
    # the inside region is the ellipsoid itself
    k, s = 3, 16
    assert inside[k, s, s] and not inside[k, 0, 0]


def test_phases_share_geometry_when_aligned():
    t = generate_phantom_triple(PhantomSpec(image_size=64, depth=4), 3)
    changed = t.venous.voxels != t.native.voxels
    assert 0 < changed.mean() < 0.2
    assert t.native.voxels.min() == -1.0  # air background


def test_misalignment_moves_contrast_phases_only():
    spec = PhantomSpec(image_size=64, depth=4, misalignment=2.0)
    t = generate_phantom_triple(spec, 3)
    assert set(t.fields) == {"venous", "arterial"}
    assert np.abs(t.fields["venous"][1:]).max() == pytest.approx(2.0)
    assert not t.fields["venous"][0].any()
    aligned = generate_phantom_triple(PhantomSpec(image_size=64, depth=4), 3)
    assert aligned.native.voxels.tobytes() == t.native.voxels.tobytes()
    assert aligned.venous.voxels.tobytes() != t.venous.voxels.tobytes()


def test_structure_outside_volume_rejected():
    bad = Structure((0.5, 2.5, 0.5), (0.1, 0.1, 0.1), 0.0)
    with pytest.raises(ValueError, match="outside"):
        generate_phantom_triple(PhantomSpec(image_size=16, depth=2, structures=(bad,)), 0)


# ------------------------------------------------------------------ split

def test_split_sizes_70_15_15():
    tr, va, te = split(list(range(100)), (0.7, 0.15, 0.15), seed=0)
    assert (len(tr), len(va), len(te)) == (70, 15, 15)
    assert sorted(tr + va + te) == list(range(100))


def test_split_is_seeded():
    items = list(range(30))
    assert split(items, seed=4) == split(items, seed=4)
    assert split(items, seed=4) != split(items, seed=5)


def test_split_keeps_patients_whole():
    patients = [{"native": i, "venous": i, "arterial": i} for i in range(10)]
    for part in split(patients, (0.6, 0.2, 0.2), seed=1):
        for p in part:
            assert p["native"] == p["venous"] == p["arterial"]


def test_single_patient_all_train():
    assert split(["p"], (1.0, 0.0, 0.0)) == (["p"], [], [])


def test_split_errors():
    with pytest.raises(ValueError):
        split(list(range(10)), (0.5, 0.5, 0.5))
    with pytest.raises(ValueError, match="empty"):
        split(list(range(2)), (0.7, 0.15, 0.15))
