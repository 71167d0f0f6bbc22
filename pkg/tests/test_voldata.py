import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rrnreg import voldata
from rrnreg.voldata import CropBox, Dvf, LandmarkSet, Volume, VolumeFormatError


def random_volume(rng, dims=(16, 16, 16), units="HU"):
    data = rng.uniform(-1000, -100, size=dims).astype(np.float32)
    return Volume(data, spacing=(0.6, 0.6, 2.5), origin=(1.0, -2.0, 3.0), units=units)


# ---------------------------------------------------------------------------
# Volume type


def test_volume_invariants():
    with pytest.raises(VolumeFormatError):
        Volume(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(VolumeFormatError):
        Volume(np.zeros((2, 2, 2), dtype=np.float32), spacing=(1, 0, 1))
    bad = np.zeros((2, 2, 2), dtype=np.float32)
    bad[0, 0, 0] = np.nan
    with pytest.raises(VolumeFormatError):
        Volume(bad)


def test_volume_roundtrip_zero(tmp_path):
    v = Volume(np.zeros((4, 4, 4), dtype=np.float32))
    path = voldata.save_volume(v, str(tmp_path / "zeros"))
    back = voldata.load_volume(path)
    assert back.dims == (4, 4, 4)
    assert back.spacing == (1.0, 1.0, 1.0)
    assert (back.data == 0).all()


def test_volume_roundtrip_bits(tmp_path):
    rng = np.random.default_rng(5)
    v = random_volume(rng)
    path = voldata.save_volume(v, str(tmp_path / "vol.hdr"))
    back = voldata.load_volume(path)
    assert back.data.dtype == np.float32
    assert back.data.tobytes() == v.data.tobytes()
    assert back.spacing == v.spacing and back.origin == v.origin and back.units == v.units


def test_volume_roundtrip_int16(tmp_path):
    rng = np.random.default_rng(6)
    v = Volume(rng.integers(-1000, -100, size=(5, 6, 7)).astype(np.int16))
    back = voldata.load_volume(voldata.save_volume(v, str(tmp_path / "i16")))
    assert back.data.dtype == np.int16
    assert back.data.tobytes() == v.data.tobytes()


def test_payload_size_mismatch(tmp_path):
    v = Volume(np.zeros((2, 2, 2), dtype=np.float32))
    path = voldata.save_volume(v, str(tmp_path / "v.hdr"))
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-4])  # drop one voxel
    with pytest.raises(VolumeFormatError, match="payload"):
        voldata.load_volume(path)


def test_nonfinite_payload_rejected(tmp_path):
    v = Volume(np.ones((2, 2, 2), dtype=np.float32))
    path = voldata.save_volume(v, str(tmp_path / "v.hdr"))
    data = np.full(8, np.inf, dtype="<f4")
    (tmp_path / "v.raw").write_bytes(data.tobytes())
    with pytest.raises(VolumeFormatError, match="non-finite"):
        voldata.load_volume(path)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        voldata.load_volume("/nonexistent/vol.hdr")


def test_metaimage_header(tmp_path):
    data = np.arange(24, dtype="<i2")
    (tmp_path / "img.raw").write_bytes(data.tobytes())
    (tmp_path / "img.mhd").write_text(
        "ObjectType = Image\nNDims = 3\nDimSize = 2 3 4\n"
        "ElementSpacing = 0.5 0.75 2.0\nOffset = 1 2 3\n"
        "ElementType = MET_SHORT\nElementDataFile = img.raw\n"
    )
    v = voldata.load_volume(str(tmp_path / "img.mhd"))
    # DimSize is x y z; internal order is (z, y, x)
    assert v.dims == (4, 3, 2)
    assert v.spacing == (2.0, 0.75, 0.5)
    assert v.origin == (3.0, 2.0, 1.0)
    assert v.data.ravel()[1] == 1


def test_metaimage_local_payload(tmp_path):
    data = np.arange(8, dtype="<f4")
    head = (
        "ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\n"
        "ElementType = MET_FLOAT\nElementDataFile = LOCAL\n"
    )
    (tmp_path / "img.mha").write_bytes(head.encode() + data.tobytes())
    v = voldata.load_volume(str(tmp_path / "img.mha"))
    assert v.dims == (2, 2, 2)
    np.testing.assert_allclose(v.data.ravel(), np.arange(8))


# ---------------------------------------------------------------------------
# preprocessing


def test_clip_values():
    v = Volume(np.array([[[-1200.0, -500.0, 50.0]]], dtype=np.float32))
    out = voldata.clip_intensities(v, -1000, -100)
    np.testing.assert_array_equal(out.data.ravel(), [-1000.0, -500.0, -100.0])


def test_clip_bad_bounds():
    v = Volume(np.zeros((1, 1, 1), dtype=np.float32))
    with pytest.raises(ValueError):
        voldata.clip_intensities(v, -100, -1000)


@given(
    lo=st.floats(-2000, -500),
    hi=st.floats(-400, 500),
    seed=st.integers(0, 2**16),
)
@settings(max_examples=25, deadline=None)
def test_clip_idempotent(lo, hi, seed):
    rng = np.random.default_rng(seed)
    v = Volume(rng.uniform(-3000, 3000, size=(4, 4, 4)).astype(np.float32))
    once = voldata.clip_intensities(v, lo, hi)
    twice = voldata.clip_intensities(once, lo, hi)
    assert (once.data == twice.data).all()


def test_crop_identity():
    rng = np.random.default_rng(0)
    v = random_volume(rng, (5, 6, 7))
    out = voldata.crop(v, CropBox((0, 0, 0), (5, 6, 7)))
    assert (out.data == v.data).all()
    assert out.origin == v.origin


def test_crop_ramp_oracle():
    # f(z, y, x) = x; direct indexing gives the expected sub-block
    x = np.broadcast_to(np.arange(4, dtype=np.float32), (4, 4, 4)).copy()
    v = Volume(x, spacing=(1, 2, 3))
    out = voldata.crop(v, CropBox((1, 1, 1), (3, 3, 3)))
    assert out.dims == (2, 2, 2)
    assert set(np.unique(out.data)) == {1.0, 2.0}
    np.testing.assert_array_equal(out.data, x[1:3, 1:3, 1:3])
    assert out.origin == (1.0, 2.0, 3.0)


def test_crop_out_of_bounds():
    v = Volume(np.zeros((4, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        voldata.crop(v, CropBox((0, 0, 0), (5, 4, 4)))
    with pytest.raises(ValueError):
        CropBox((2, 2, 2), (2, 3, 3))


def test_resample_identity():
    rng = np.random.default_rng(1)
    v = random_volume(rng, (6, 5, 4))
    out = voldata.resample(v, (6, 5, 4))
    np.testing.assert_allclose(out.data, v.data, atol=1e-6)


def test_resample_constant():
    v = Volume(np.full((4, 4, 4), 7.0, dtype=np.float32))
    out = voldata.resample(v, (9, 5, 3))
    np.testing.assert_allclose(out.data, 7.0, atol=1e-6)


def test_resample_linear_ramp():
    # trilinear interpolation reproduces a linear function exactly in the
    # corner-aligned continuous coordinate
    x = np.broadcast_to(np.arange(8, dtype=np.float64), (2, 2, 8)).copy()
    v = Volume(x.astype(np.float32), spacing=(1, 1, 2))
    out = voldata.resample(v, (2, 2, 15))
    expected = np.arange(15) * 7.0 / 14.0
    np.testing.assert_allclose(out.data[0, 0], expected, atol=1e-6)
    # physical extent between outer voxel centers preserved
    assert abs(out.spacing[2] * 14 - v.spacing[2] * 7) < 1e-6


def test_resample_degenerate_target():
    v = Volume(np.zeros((4, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        voldata.resample(v, (4, 4, 1))


def test_lung_crop_heuristic():
    data = np.zeros((12, 12, 12), dtype=np.float32)
    data[3:7, 4:8, 2:6] = -500.0  # below -320 block
    v = Volume(data)
    box = voldata.lung_crop_heuristic(v, threshold=-320.0, pad=1)
    assert box.lo == (2, 3, 1) and box.hi == (8, 9, 7)


# ---------------------------------------------------------------------------
# landmarks and grid transforms


def write_landmarks(tmp_path, mov_lines, fix_lines):
    mp, fp = tmp_path / "mov.txt", tmp_path / "fix.txt"
    mp.write_text("\n".join(mov_lines) + "\n")
    fp.write_text("\n".join(fix_lines) + "\n")
    return str(mp), str(fp)


def test_load_landmarks_parse(tmp_path):
    mp, fp = write_landmarks(tmp_path, ["10 20 5"], ["12 20 5"])
    lms = voldata.load_landmarks(mp, fp, "g", (1, 1, 1))
    # file order is x y z, 1-based; internal (z, y, x), 0-based
    np.testing.assert_array_equal(lms.moving, [[4, 19, 9]])
    np.testing.assert_array_equal(lms.fixed, [[4, 19, 11]])
    delta = lms.fixed - lms.moving
    np.testing.assert_array_equal(delta, [[0, 0, 2]])


def test_load_landmarks_count_mismatch(tmp_path):
    mp, fp = write_landmarks(tmp_path, ["1 1 1", "2 2 2"], ["1 1 1"])
    with pytest.raises(ValueError, match="count mismatch"):
        voldata.load_landmarks(mp, fp, "g", (1, 1, 1))


def test_load_landmarks_unparsable(tmp_path):
    mp, fp = write_landmarks(tmp_path, ["1 1"], ["1 1 1"])
    with pytest.raises(ValueError, match="expected 3"):
        voldata.load_landmarks(mp, fp, "g", (1, 1, 1))
    mp, fp = write_landmarks(tmp_path, ["a b c"], ["1 1 1"])
    with pytest.raises(ValueError, match="unparsable"):
        voldata.load_landmarks(mp, fp, "g", (1, 1, 1))


def test_load_landmarks_out_of_grid(tmp_path):
    mp, fp = write_landmarks(tmp_path, ["50 1 1"], ["1 1 1"])
    with pytest.raises(ValueError, match="outside grid"):
        voldata.load_landmarks(mp, fp, "g", (1, 1, 1), dims=(10, 10, 10))


def test_save_landmarks_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    mov = rng.uniform(0, 9, size=(7, 3))
    fix = rng.uniform(0, 9, size=(7, 3))
    lms = LandmarkSet(mov, fix, "g", (1.0, 1.0, 1.0))
    voldata.save_landmarks(lms, str(tmp_path / "m.txt"), str(tmp_path / "f.txt"))
    back = voldata.load_landmarks(str(tmp_path / "m.txt"), str(tmp_path / "f.txt"), "g", (1, 1, 1))
    np.testing.assert_allclose(back.moving, mov, atol=1e-5)
    np.testing.assert_allclose(back.fixed, fix, atol=1e-5)


def test_map_landmarks_identity():
    lms = LandmarkSet(np.array([[1.0, 2.0, 3.0]]), np.array([[4.0, 5.0, 6.0]]), "a", (1, 1, 1))
    t = voldata.grid_transform_for((10, 10, 10), None, (10, 10, 10), "a", "b")
    out = voldata.map_landmarks(lms, t)
    np.testing.assert_allclose(out.moving, lms.moving)
    assert out.grid_tag == "b"


def test_map_landmarks_translation():
    lms = LandmarkSet(np.array([[20.0, 20.0, 20.0]]), np.array([[20.0, 20.0, 20.0]]), "a", (1, 1, 1))
    box = CropBox((10, 10, 10), (40, 40, 40))
    t = voldata.GridTransform((50, 50, 50), (30, 30, 30), box, (1.0, 1.0, 1.0), "a", "b")
    out = voldata.map_landmarks(lms, t)
    np.testing.assert_allclose(out.moving, [[10.0, 10.0, 10.0]])


def test_map_landmarks_pointwise_oracle():
    rng = np.random.default_rng(3)
    pts = rng.uniform(12, 28, size=(20, 3))
    lms = LandmarkSet(pts, pts + 0.5, "a", (0.6, 0.6, 2.5))
    box = CropBox((10, 10, 10), (40, 42, 44))
    t = voldata.grid_transform_for((64, 64, 64), box, (16, 17, 18), "a", "b")
    out = voldata.map_landmarks(lms, t)
    # per-point arithmetic oracle
    for i in range(20):
        for axis in range(3):
            scale = (t.target_dims[axis] - 1) / (box.dims[axis] - 1)
            assert out.moving[i, axis] == pytest.approx((pts[i, axis] - 10) * scale, abs=1e-12)
    # spacing rescaled so mm distances are preserved under the grid change
    np.testing.assert_allclose(np.asarray(out.spacing) * np.asarray(t.scale), lms.spacing)


def test_map_landmarks_tag_mismatch():
    lms = LandmarkSet(np.zeros((1, 3)), np.zeros((1, 3)), "other", (1, 1, 1))
    t = voldata.grid_transform_for((10, 10, 10), None, (5, 5, 5), "a", "b")
    with pytest.raises(ValueError, match="grid"):
        voldata.map_landmarks(lms, t)


def test_map_landmarks_flags_out_of_grid():
    pts = np.array([[5.0, 5.0, 5.0], [39.0, 5.0, 5.0]])
    lms = LandmarkSet(pts, pts, "a", (1, 1, 1))
    box = CropBox((0, 0, 0), (20, 20, 20))
    t = voldata.grid_transform_for((40, 40, 40), box, (20, 20, 20), "a", "b")
    out = voldata.map_landmarks(lms, t)
    assert out.flagged == (1,)
    assert len(out) == 2  # kept, not dropped


@given(st.integers(0, 2**16))
@settings(max_examples=30, deadline=None)
def test_grid_transform_roundtrip(seed):
    rng = np.random.default_rng(seed)
    source = tuple(int(n) for n in rng.integers(20, 80, size=3))
    lo = tuple(int(v) for v in rng.integers(0, 5, size=3))
    hi = tuple(int(l) + int(n) for l, n in zip(lo, rng.integers(10, 14, size=3)))
    box = CropBox(lo, tuple(min(h, s) for h, s in zip(hi, source)))
    target = tuple(int(n) for n in rng.integers(8, 30, size=3))
    t = voldata.grid_transform_for(source, box, target, "a", "b")
    pts = rng.uniform(np.asarray(box.lo), np.asarray(box.hi) - 1.0, size=(10, 3))
    back = t.inverse().apply(t.apply(pts))
    np.testing.assert_allclose(back, pts, atol=1e-9)


# ---------------------------------------------------------------------------
# displacement fields


def test_dvf_roundtrip_zero(tmp_path):
    d = voldata.zero_dvf((3, 4, 5), level=2, grid_tag="g")
    back = voldata.load_dvf(voldata.save_dvf(d, str(tmp_path / "z.dvf")))
    assert back.data.tobytes() == d.data.tobytes()
    assert back.level == 2 and back.grid_tag == "g"


def test_dvf_roundtrip_random(tmp_path):
    rng = np.random.default_rng(9)
    d = Dvf(rng.standard_normal((3, 8, 8, 8)).astype(np.float32), level=1)
    back = voldata.load_dvf(voldata.save_dvf(d, str(tmp_path / "r")))
    assert back.data.tobytes() == d.data.tobytes()


def test_dvf_sidecar_mismatch(tmp_path):
    d = voldata.zero_dvf((4, 4, 4))
    path = voldata.save_dvf(d, str(tmp_path / "d.dvf"))
    (tmp_path / "d.raw").write_bytes(b"\x00" * 4 * (3 * 64 - 1))
    with pytest.raises(VolumeFormatError, match="sidecar declares"):
        voldata.load_dvf(path)


def test_dvf_validation():
    with pytest.raises(ValueError):
        Dvf(np.zeros((2, 4, 4, 4), dtype=np.float32))
    bad = np.zeros((3, 2, 2, 2), dtype=np.float32)
    bad[0, 0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        Dvf(bad)


def test_atomic_write_leaves_no_partials(tmp_path):
    target = tmp_path / "out.bin"
    voldata.atomic_write_bytes(str(target), b"hello")
    assert target.read_bytes() == b"hello"
    leftovers = [p for p in tmp_path.iterdir() if p.name != "out.bin"]
    assert leftovers == []
