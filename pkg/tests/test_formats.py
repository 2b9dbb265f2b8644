import io

import numpy as np
import pytest

from scoredd.formats import (
    BadDtypeError,
    BadMagicError,
    FormatError,
    ManifestRecord,
    TruncatedError,
    decode_tensor,
    encode_tensor,
    read_manifest,
    read_pgm,
    read_tensor,
    to_uint8,
    write_manifest,
    write_pgm,
    write_tensor,
)


def test_tensor_header_bytes():
    data = encode_tensor(np.zeros((2, 3), dtype=np.float32))
    assert data[:16] == b"SDD1" + bytes.fromhex("01020000") + bytes.fromhex("02000000") + bytes.fromhex("03000000")
    assert len(data) == 16 + 6 * 4


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_tensor_round_trip(tmp_path, dtype):
    a = np.random.default_rng(0).standard_normal((3, 1, 4, 5)).astype(dtype)
    write_tensor(tmp_path / "a.sdd", a)
    b = read_tensor(tmp_path / "a.sdd")
    assert b.dtype == a.dtype
    np.testing.assert_array_equal(a, b)
    s = decode_tensor(io.BytesIO(encode_tensor(np.float64(2.5))))
    assert s.shape == () and s == 2.5


def test_tensor_errors(tmp_path):
    good = encode_tensor(np.ones(4))
    with pytest.raises(BadMagicError):
        decode_tensor(io.BytesIO(b"SDD2" + good[4:]))
    with pytest.raises(BadDtypeError):
        decode_tensor(io.BytesIO(good[:4] + b"\x07" + good[5:]))
    with pytest.raises(BadDtypeError):
        encode_tensor(np.ones(3, dtype=np.int32))
    with pytest.raises(TruncatedError):
        decode_tensor(io.BytesIO(good[:-1]))
    with pytest.raises(FormatError):
        decode_tensor(io.BytesIO(good[:6] + b"\x01\x00" + good[8:]))
    (tmp_path / "x.sdd").write_bytes(good + b"\x00")
    with pytest.raises(FormatError):
        read_tensor(tmp_path / "x.sdd")


def test_pgm_header_and_round_trip(tmp_path):
    img = np.arange(16, dtype=np.uint8).reshape(4, 4) * 16
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 4\n255\n") and len(raw) == 11 + 16
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_scaling_and_comments(tmp_path):
    write_pgm(tmp_path / "m.pgm", np.array([[0.0, 0.5], [1.0, 2.0]]))
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), [[0, 64], [128, 255]])
    np.testing.assert_array_equal(to_uint8(np.full((2, 2), 3.0)), 0)
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), [[1, 2]])


def test_pgm_errors(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "a.pgm")
    (tmp_path / "b.pgm").write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "b.pgm")
    (tmp_path / "c.pgm").write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(TruncatedError):
        read_pgm(tmp_path / "c.pgm")
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "d.pgm", np.zeros((2, 2, 2)))


def test_manifest_round_trip(tmp_path):
    recs = [ManifestRecord("a.pgm", "train", 0), ManifestRecord("b.pgm", "test", 1, "b_mask.pgm")]
    write_manifest(tmp_path / "m.tsv", recs)
    assert (tmp_path / "m.tsv").read_text().splitlines()[1] == "b.pgm\ttest\t1\tb_mask.pgm"
    back = read_manifest(tmp_path / "m.tsv")
    assert back[0].path == str(tmp_path / "a.pgm") and back[0].mask_path == "-"
    assert back[1].label == 1 and back[1].mask_path == str(tmp_path / "b_mask.pgm")
    (tmp_path / "bad.tsv").write_text("a.pgm\ttrain\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "bad.tsv")
