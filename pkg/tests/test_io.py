import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from utaam.exceptions import DataFormatError
from utaam.io import (read_container, read_pgm, read_pts, read_tensor, read_visibility,
                      tensor_from_bytes, tensor_to_bytes, tensors_from_bytes, tensors_to_bytes,
                      write_container, write_pgm, write_pts, write_tensor, write_visibility)


class TestTensorFormat:
    def test_layout(self):
        x = np.arange(6, dtype=float).reshape(2, 3)
        buf = tensor_to_bytes(x)
        assert buf[:4] == b"UTT1"
        assert struct.unpack("<III", buf[4:16]) == (2, 2, 3)
        assert struct.unpack("<6d", buf[16:]) == tuple(range(6))

    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=5, max_side=4),
                      elements=st.floats(allow_nan=False, width=64)))
    def test_bit_exact_bytes(self, x):
        y, end = tensor_from_bytes(tensor_to_bytes(x))
        assert end == len(tensor_to_bytes(x))
        assert y.tobytes() == np.ascontiguousarray(x).tobytes()

    def test_file_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(3, 1, 4, 2))
        write_tensor(tmp_path / "x.utt", x)
        assert read_tensor(tmp_path / "x.utt").tobytes() == x.tobytes()

    def test_nan_and_signed_zero_preserved(self):
        x = np.array([np.nan, -0.0, np.inf])
        y, _ = tensor_from_bytes(tensor_to_bytes(x))
        assert y.tobytes() == x.tobytes()

    def test_sequence(self, rng):
        arrays = [rng.normal(size=(2,)), rng.normal(size=(1, 3))]
        back, end = tensors_from_bytes(tensors_to_bytes(arrays))
        assert len(back) == 2 and all(np.array_equal(a, b) for a, b in zip(arrays, back))

    @pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3],
                                        lambda b: b[:9], lambda b: b + b"\0"])
    def test_corrupt(self, tmp_path, mutate):
        (tmp_path / "x.utt").write_bytes(mutate(tensor_to_bytes(np.ones((2, 2)))))
        with pytest.raises(DataFormatError):
            read_tensor(tmp_path / "x.utt")


class TestContainer:
    def test_round_trip(self, tmp_path):
        chunks = {"MEAN_S": b"abc", "CASC": b"", "HOG": bytes(range(256))}
        write_container(tmp_path / "m.bin", b"UTAM", 3, chunks)
        version, back = read_container(tmp_path / "m.bin", b"UTAM")
        assert version == 3 and back == chunks and list(back) == list(chunks)

    def test_wrong_magic(self, tmp_path):
        write_container(tmp_path / "m.bin", b"UTAM", 1, {})
        with pytest.raises(DataFormatError, match="magic"):
            read_container(tmp_path / "m.bin", b"ABCD")

    def test_truncated_chunk(self, tmp_path):
        write_container(tmp_path / "m.bin", b"UTAM", 1, {"A": b"12345"})
        (tmp_path / "m.bin").write_bytes((tmp_path / "m.bin").read_bytes()[:-2])
        with pytest.raises(DataFormatError, match="truncated"):
            read_container(tmp_path / "m.bin", b"UTAM")

    def test_long_name(self, tmp_path):
        with pytest.raises(ValueError):
            write_container(tmp_path / "m.bin", b"UTAM", 1, {"TOO_LONG_NAME": b""})


class TestPts:
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 30), st.just(2)),
                      elements=st.floats(-1e4, 1e4)))
    def test_round_trip_precision(self, tmp_path_factory, pts):
        path = tmp_path_factory.mktemp("pts") / "a.pts"
        write_pts(path, pts)
        assert np.abs(read_pts(path) - pts).max() <= 5e-7 + 1e-12 * np.abs(pts).max()

    def test_format(self, tmp_path):
        write_pts(tmp_path / "a.pts", [[1, 2.5]])
        assert (tmp_path / "a.pts").read_text() == "version: 1\nn_points: 1\n{\n1.000000 2.500000\n}\n"

    @pytest.mark.parametrize("text", ["version: 1\n{\n1 2\n}\n",
                                      "n_points: 2\n{\n1 2\n}\n",
                                      "n_points: 1\n{\n1 2 3\n}\n",
                                      "n_points: 1\n{\n1 x\n}\n"])
    def test_malformed(self, tmp_path, text):
        (tmp_path / "a.pts").write_text(text)
        with pytest.raises(DataFormatError):
            read_pts(tmp_path / "a.pts")


class TestVisibility:
    def test_round_trip(self, tmp_path):
        v = np.array([True, False, True])
        write_visibility(tmp_path / "a.vis", v)
        np.testing.assert_array_equal(read_visibility(tmp_path / "a.vis"), v)

    def test_bad_entry_names_line(self, tmp_path):
        (tmp_path / "a.vis").write_text("1\n2\n")
        with pytest.raises(DataFormatError, match=":2:"):
            read_visibility(tmp_path / "a.vis")


class TestPgm:
    def test_uint8_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(7, 11)).astype(np.uint8)
        write_pgm(tmp_path / "a.pgm", img)
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)

    def test_float_quantisation(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.array([[0.0, 0.5, 1.0, 2.0]]))
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), [[0, 128, 255, 255]])

    def test_header_comment(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P5\n# note\n2 1\n255\n\x01\x02")
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), [[1, 2]])

    @pytest.mark.parametrize("raw", [b"P2\n1 1\n255\n0", b"P5\n1 1\n65535\n\0\0", b"P5\n2 2\n255\n\0",
                                     b"P5\n2"])
    def test_rejected(self, tmp_path, raw):
        (tmp_path / "a.pgm").write_bytes(raw)
        with pytest.raises(DataFormatError):
            read_pgm(tmp_path / "a.pgm")
