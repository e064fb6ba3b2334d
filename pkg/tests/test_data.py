import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbssl.data import (
    AugmentConfig, BadMagicError, DataError, FortranOrderError, HeaderError, PayloadLengthError,
    ShapeRankError, SynthSpec, UnsupportedDtypeError, Volume, apply_augment, augment, augment_volume,
    band_discriminant, generate_synthetic, load_split, npy_bytes, parse_npy, read_npy, resize_bilinear,
    write_dataset, write_npy,
)
from sbssl.metrics import roc_auc


def _npy(header, payload=b"", major=1):
    body = header.encode("latin1")
    if major == 1:
        return b"\x93NUMPY\x01\x00" + struct.pack("<H", len(body)) + body + payload
    return b"\x93NUMPY\x02\x00" + struct.pack("<I", len(body)) + body + payload


class TestNpyRead:
    def test_hand_uint8(self, tmp_path):
        raw = _npy("{'descr': '|u1', 'fortran_order': False, 'shape': (1, 2, 2), }\n", bytes([0, 51, 255, 102]))
        (tmp_path / "a.npy").write_bytes(raw)
        v = read_npy(tmp_path / "a.npy")
        assert v.exam_id == "a" and v.slices.dtype == np.float32
        np.testing.assert_allclose(v.slices, [[[0.0, 0.2], [1.0, 0.4]]], rtol=1e-7)

    def test_version_two(self):
        raw = _npy("{'descr': '<f4', 'fortran_order': False, 'shape': (1, 1, 2), }\n",
                   np.array([0.25, 0.5], "<f4").tobytes(), major=2)
        assert parse_npy(raw).tolist() == [[[0.25, 0.5]]]

    @pytest.mark.parametrize("dtype", [np.uint8, np.float32, np.float64])
    def test_numpy_written_files_parse(self, tmp_path, rng, dtype):
        arr = (rng.uniform(size=(3, 5, 4)) * (255 if dtype == np.uint8 else 1)).astype(dtype)
        np.save(tmp_path / "x.npy", arr)
        np.testing.assert_array_equal(parse_npy((tmp_path / "x.npy").read_bytes()), arr)

    def test_writer_matches_numpy_loader(self, tmp_path, rng):
        arr = rng.uniform(size=(4, 6, 6)).astype(np.float32)
        write_npy(Volume("x", arr), tmp_path / "x.npy")
        np.testing.assert_array_equal(np.load(tmp_path / "x.npy"), arr)

    def test_header_alignment(self, rng):
        raw = npy_bytes(rng.uniform(size=(2, 3, 3)).astype(np.float32))
        (hlen,) = struct.unpack("<H", raw[8:10])
        assert (10 + hlen) % 64 == 0 and raw[10 + hlen - 1:10 + hlen] == b"\n"

    def test_out_of_range_floats_rescaled(self, tmp_path):
        np.save(tmp_path / "x.npy", np.array([[[-1.0, 3.0]]], dtype=np.float32))
        assert read_npy(tmp_path / "x.npy").slices.tolist() == [[[0.0, 1.0]]]


class TestNpyErrors:
    good = "{'descr': '<f4', 'fortran_order': False, 'shape': (1, 1, 1), }\n"

    def test_bad_magic(self):
        with pytest.raises(BadMagicError):
            parse_npy(b"\x93NUMPX\x01\x00" + b"\0" * 30)

    def test_fortran(self):
        with pytest.raises(FortranOrderError):
            parse_npy(_npy(self.good.replace("False", "True"), b"\0" * 4))

    def test_dtype(self):
        with pytest.raises(UnsupportedDtypeError):
            parse_npy(_npy(self.good.replace("<f4", "<i4"), b"\0" * 4))

    def test_rank(self):
        with pytest.raises(ShapeRankError):
            parse_npy(_npy(self.good.replace("(1, 1, 1)", "(1, 1)"), b"\0" * 4))

    def test_truncated_payload(self):
        with pytest.raises(PayloadLengthError):
            parse_npy(_npy(self.good, b"\0" * 3))

    def test_garbled_header(self):
        with pytest.raises(HeaderError):
            parse_npy(_npy("{'descr': <f4", b""))

    def test_errors_distinct(self):
        kinds = {BadMagicError, FortranOrderError, UnsupportedDtypeError, ShapeRankError, PayloadLengthError}
        assert len(kinds) == 5 and not any(a is not b and issubclass(a, b) for a in kinds for b in kinds)


def test_round_trip(tmp_path, rng):
    for i in range(20):
        arr = rng.uniform(size=tuple(rng.integers(1, 6, size=3))).astype(np.float32)
        write_npy(Volume("r", arr), tmp_path / "r.npy")
        assert read_npy(tmp_path / "r.npy").slices.tobytes() == arr.tobytes()


def test_write_empty_rejected(tmp_path):
    with pytest.raises(DataError):
        write_npy(np.zeros((0, 2, 2), np.float32), tmp_path / "e.npy")


class TestAugment:
    def test_off_is_identity(self, rng):
        img = rng.uniform(size=(8, 8)).astype(np.float32)
        assert augment(img, AugmentConfig.off(), rng) is img

    def test_flip_only(self, rng):
        img = rng.uniform(size=(8, 8))
        np.testing.assert_array_equal(apply_augment(img, {"flip": True}), img[:, ::-1])

    def test_contrast_keeps_mean(self):
        img = np.linspace(0.3, 0.7, 16).reshape(4, 4)
        out = apply_augment(img, {"contrast": 0.5})
        assert out.mean() == pytest.approx(img.mean())
        assert np.ptp(out) == pytest.approx(0.5 * np.ptp(img))

    def test_sharpness_one_is_identity(self, rng):
        img = rng.uniform(size=(6, 6))
        np.testing.assert_allclose(apply_augment(img, {"sharpness": 1.0}), img, atol=1e-15)

    def test_full_crop_is_identity(self, rng):
        img = rng.uniform(size=(6, 6))
        np.testing.assert_allclose(apply_augment(img, {"crop": (0, 0, 6)}), img, atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_range_shape_dtype(self, seed):
        rng = np.random.default_rng(seed)
        img = rng.uniform(size=(12, 12)).astype(np.float32)
        out = augment(img, AugmentConfig(flip_p=1, blur_p=1, sharpness_p=1, contrast_p=1), rng)
        assert out.shape == img.shape and out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_volume_shares_params(self, rng):
        s = rng.uniform(size=(1, 10, 10)).astype(np.float32)
        out = augment_volume(np.concatenate([s, s, s]), AugmentConfig(), rng)
        assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])

    def test_resize_corners(self):
        img = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = resize_bilinear(img, 5, 5)
        assert (out[0, 0], out[0, -1], out[-1, 0], out[-1, -1]) == (0.0, 1.0, 2.0, 3.0)
        assert out[2, 2] == pytest.approx(1.5)


class TestSynthetic:
    spec = SynthSpec(n_train=40, n_valid=12, f_min=3, f_max=5, size=16)

    def test_counts(self):
        d = generate_synthetic(self.spec)
        assert len(d["train"]) == 40 and len(d["valid"]) == 12
        assert sum(v.label for v in d["train"]) == 10 and sum(v.label for v in d["valid"]) == 3
        assert all(3 <= v.num_slices <= 5 and v.slices.shape[1:] == (16, 16) for v in d["train"])

    def test_no_valid(self):
        assert set(generate_synthetic(SynthSpec(n_train=4, n_valid=0))) == {"train"}

    def test_deterministic_bytes(self, tmp_path):
        write_dataset(generate_synthetic(self.spec), tmp_path / "a")
        write_dataset(generate_synthetic(self.spec), tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 40 + 12 + 2
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_band_separates(self):
        d = generate_synthetic(self.spec)
        scores = [band_discriminant(v, self.spec.band_width) for v in d["train"]]
        assert roc_auc(scores, [v.label for v in d["train"]]).auc == 1.0

    def test_bad_rate(self):
        with pytest.raises(DataError):
            SynthSpec(positive_rate=1.5)

    def test_load_split(self, tmp_path):
        d = generate_synthetic(self.spec)
        write_dataset(d, tmp_path)
        vols = load_split(tmp_path, "valid")
        assert [v.exam_id for v in vols] == [v.exam_id for v in d["valid"]]
        assert [v.label for v in vols] == [v.label for v in d["valid"]]
        assert all(np.array_equal(a.slices, b.slices) for a, b in zip(vols, d["valid"]))

    def test_load_split_missing(self, tmp_path):
        with pytest.raises(DataError):
            load_split(tmp_path, "train")
        write_dataset(generate_synthetic(self.spec), tmp_path)
        next((tmp_path / "train" / "sagittal").glob("*.npy")).unlink()
        with pytest.raises(DataError):
            load_split(tmp_path, "train")
