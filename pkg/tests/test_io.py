"""Tests for PGM, landmark and field file formats."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradicon.io import (
    FormatError,
    load_field_csv,
    load_field_raw,
    load_landmarks,
    load_pgm,
    save_field_csv,
    save_field_raw,
    save_landmarks,
    save_pgm,
)
from gradicon.synthdata import LandmarkSet


class TestPGM:
    """16-bit binary PGM."""

    def test_round_trip_bound(self, tmp_path):
        img = np.random.default_rng(0).random((13, 17))
        save_pgm(tmp_path / "a.pgm", img)
        back = load_pgm(tmp_path / "a.pgm")
        assert back.shape == (13, 17) and np.abs(back - img).max() <= 1 / 65535

    def test_batched_plane_and_clip(self, tmp_path):
        save_pgm(tmp_path / "b.pgm", np.full((1, 1, 4, 4), 2.0))
        assert np.all(load_pgm(tmp_path / "b.pgm") == 1.0)

    def test_8bit_and_comments(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# comment\n2 1\n255\n" + bytes([0, 255]))
        assert np.array_equal(load_pgm(path), [[0.0, 1.0]])

    def test_errors(self, tmp_path):
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
        with pytest.raises(FormatError):
            load_pgm(bad)
        short = tmp_path / "short.pgm"
        short.write_bytes(b"P5\n2 2\n255\n" + bytes(3))
        with pytest.raises(FormatError, match="expected 4 pixels"):
            load_pgm(short)
        save_pgm(tmp_path / "ok.pgm", np.zeros((4, 4)))
        with pytest.raises(FormatError, match="expected"):
            load_pgm(tmp_path / "ok.pgm", expected_shape=(8, 8))
        with pytest.raises(FormatError):
            save_pgm(tmp_path / "x.pgm", np.zeros((2, 4, 4)))


class TestLandmarks:
    """Landmark CSV."""

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 20))
    def test_round_trip_exact(self, tmp_path_factory, seed, k):
        rng = np.random.default_rng(seed)
        lm = LandmarkSet(rng.random((k, 2)), rng.random((k, 2)))
        path = tmp_path_factory.mktemp("lm") / "lm.csv"
        save_landmarks(path, lm)
        back = load_landmarks(path)
        assert np.array_equal(back.points_a, lm.points_a) and np.array_equal(back.points_b, lm.points_b)

    def test_errors(self, tmp_path):
        path = tmp_path / "lm.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(FormatError, match="header"):
            load_landmarks(path)
        path.write_text("xA,yA,xB,yB\n1,2,x,4\n")
        with pytest.raises(FormatError):
            load_landmarks(path)
        with pytest.raises(FormatError):
            save_landmarks(path, LandmarkSet(np.zeros((2, 3)), np.zeros((2, 3))))


class TestFields:
    """Displacement fields as CSV and raw binary."""

    def test_raw_bit_identical(self, tmp_path):
        field = np.random.default_rng(1).standard_normal((2, 9, 7))
        save_field_raw(tmp_path / "f.raw", field)
        assert load_field_raw(tmp_path / "f.raw").tobytes() == field.tobytes()

    def test_raw_accepts_batched(self, tmp_path):
        field = np.random.default_rng(2).standard_normal((1, 2, 4, 4))
        save_field_raw(tmp_path / "f.raw", field)
        assert np.array_equal(load_field_raw(tmp_path / "f.raw"), field[0])

    def test_csv_round_trip(self, tmp_path):
        field = np.random.default_rng(3).standard_normal((2, 5, 6))
        save_field_csv(tmp_path / "f.csv", field)
        assert np.array_equal(load_field_csv(tmp_path / "f.csv"), field)
        assert (tmp_path / "f.csv").read_text().splitlines()[0] == "shape,2,5,6"

    def test_errors(self, tmp_path):
        path = tmp_path / "bad.raw"
        path.write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(FormatError, match="magic"):
            load_field_raw(path)
        save_field_raw(path, np.zeros((2, 3, 3)))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            load_field_raw(path)
        with pytest.raises(FormatError):
            save_field_raw(path, np.zeros((3, 4, 4)))
        csv_path = tmp_path / "bad.csv"
        csv_path.write_text("shape,2,2,2\n1,2\n")
        with pytest.raises(FormatError):
            load_field_csv(csv_path)
