import json

import numpy as np
import pytest

from regcg.io import (PgmError, RunManifest, decode_pgm, display_range, encode_pgm, quantize,
                      read_field_csv, read_pgm, write_field_csv, write_pgm)


def test_pgm_8bit_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (13, 17)).astype(np.uint8)
    p = tmp_path / "a.pgm"
    write_pgm(p, img)
    back, maxval = read_pgm(p)
    assert maxval == 255 and back.dtype == np.uint8
    assert np.array_equal(back, img)


def test_pgm_16bit_big_endian():
    img = np.array([[0x0102, 0xFFFF], [0, 0x8000]], dtype=np.uint16)
    data = encode_pgm(img, 65535)
    header = b"P5\n2 2\n65535\n"
    assert data[: len(header)] == header
    assert data[len(header):] == bytes([0x01, 0x02, 0xFF, 0xFF, 0x00, 0x00, 0x80, 0x00])
    back, maxval = decode_pgm(data)
    assert maxval == 65535 and np.array_equal(back, img)


def test_pgm_header_with_comments():
    data = b"P5 # comment\n# another\n3 1\n# c\n255\n" + bytes([1, 2, 3])
    img, _ = decode_pgm(data)
    assert img.tolist() == [[1, 2, 3]]


def test_pgm_rejects_ascii():
    with pytest.raises(PgmError, match="P2"):
        decode_pgm(b"P2\n2 1\n255\n1 2\n")


@pytest.mark.parametrize("data, offset", [
    (b"P6\n1 1\n255\n\x00", 0),
    (b"P5\n2 x\n255\n\x00\x00", 5),
    (b"P5\n2 1\n70000\n\x00\x00", 7),
    (b"P5\n2 2\n255\n\x00", 11),
])
def test_pgm_malformed_reports_offset(data, offset):
    with pytest.raises(PgmError) as err:
        decode_pgm(data)
    assert err.value.offset == offset
    assert f"byte offset {offset}" in str(err.value)


def test_pgm_value_above_maxval():
    with pytest.raises(PgmError):
        decode_pgm(b"P5\n1 1\n100\n\xc8")
    with pytest.raises(ValueError):
        encode_pgm(np.array([[300]]), 255)


def test_quantize_and_display_range():
    f = np.array([-1.0, 0.0, 1.0, 5.0])
    q = quantize(f, -1.0, 1.0)
    assert q.tolist() == [0, 128, 255, 255]
    assert not quantize(f, 1.0, 1.0).any()
    lo, hi = display_range(np.array([1.0, 3.0]))
    assert (lo, hi) == (-1.0, 5.0)


def test_field_csv_17_digits(tmp_path):
    f = np.array([[0.1, 1 / 3], [np.pi, -1e-300]])
    p = tmp_path / "f.csv"
    write_field_csv(p, f)
    assert "0.10000000000000001" in p.read_text()
    assert np.array_equal(read_field_csv(p), f)


def test_manifest(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "a.csv").write_text("1\n")
    (tmp_path / "sub" / "b.csv").write_text("2\n")
    m = RunManifest("datacomp", {"nel": 40, "lam": 1e-9, "lambdas": [1.0, 2.0]}, 7, "rng", "0.1")
    m.record_outputs(tmp_path)
    assert list(m.outputs) == ["a.csv", "sub/b.csv"]
    path = m.write(tmp_path)
    flat = json.loads(open(path).read())
    assert flat["param.lambdas"] == "1.0,2.0"
    assert flat["seed"] == 7
    assert list(flat) == sorted(flat)
    back = RunManifest.read(path)
    assert back.outputs == m.outputs and back.command == "datacomp"
    # re-recording skips the manifest itself
    m.record_outputs(tmp_path)
    assert "run.json" not in m.outputs
