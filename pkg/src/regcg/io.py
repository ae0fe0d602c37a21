"""Binary PGM images, fixed-precision CSV fields and run manifests."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .operators import read_matrix_csv, write_matrix_csv

MANIFEST_NAME = "run.json"


class PgmError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def _header_token(data, pos):
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PgmError("unexpected end of header", start)
    return data[start:pos], start, pos


def decode_pgm(data: bytes):
    """Parse a binary (P5) PGM; returns ``(image, maxval)`` as uint8 or uint16."""
    if data[:2] == b"P2":
        raise PgmError("ASCII PGM (P2) is not supported; convert the image to binary P5")
    if data[:2] != b"P5":
        raise PgmError(f"not a binary PGM: magic {data[:2]!r}", 0)
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        tok, start, pos = _header_token(data, pos)
        if not tok.isdigit():
            raise PgmError(f"invalid {name} {tok!r}", start)
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise PgmError(f"invalid size {width}x{height}", 2)
    if not 0 < maxval <= 65535:
        raise PgmError(f"maxval {maxval} out of range 1..65535", start)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PgmError("missing whitespace after maxval", pos)
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(data) - pos < need:
        raise PgmError(f"pixel data truncated: {len(data) - pos} of {need} bytes", pos)
    img = np.frombuffer(data, dtype, width * height, pos).reshape(height, width)
    if img.max(initial=0) > maxval:
        raise PgmError(f"pixel value above maxval {maxval}", pos)
    return img.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def encode_pgm(img, maxval=None) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM images are two-dimensional")
    if maxval is None:
        maxval = 255 if img.dtype == np.uint8 else 65535
    if not 0 < maxval <= 65535:
        raise ValueError(f"maxval {maxval} out of range 1..65535")
    if np.any(img < 0) or np.any(img > maxval):
        raise ValueError(f"pixel values must lie in 0..{maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = img.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + np.asarray(img).astype(dtype).tobytes()


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return decode_pgm(data)
    except PgmError as exc:
        raise PgmError(f"{path}: {exc}") from None


def write_pgm(path, img, maxval=None):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img, maxval))


def quantize(field_, lo, hi, maxval=255):
    """Map ``[lo, hi]`` linearly onto ``0..maxval``, clipping outside values."""
    f = np.asarray(field_, dtype=float)
    if not hi > lo:
        return np.zeros(f.shape, dtype=np.uint8 if maxval <= 255 else np.uint16)
    q = np.rint((np.clip(f, lo, hi) - lo) / (hi - lo) * maxval)
    return q.astype(np.uint8 if maxval <= 255 else np.uint16)


def display_range(field_, k=3.0):
    """``mean -/+ k`` standard deviations, the colour range of the strain maps."""
    f = np.asarray(field_, dtype=float)
    m, s = float(f.mean()), float(f.std())
    return m - k * s, m + k * s


write_field_csv = write_matrix_csv
read_field_csv = read_matrix_csv


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _flat(value):
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return value


@dataclass
class RunManifest:
    """Resolved parameters of one CLI run plus checksums of what it wrote."""

    command: str
    params: dict
    seed: int | None = None
    rng: str | None = None
    version: str = ""
    outputs: dict = field(default_factory=dict)

    def flat(self):
        out = {"command": self.command, "version": self.version}
        if self.seed is not None:
            out["seed"] = self.seed
        if self.rng is not None:
            out["rng"] = self.rng
        for k, v in self.params.items():
            out[f"param.{k}"] = _flat(v)
        for k, v in self.outputs.items():
            out[f"sha256.{k}"] = v
        return out

    def to_json(self):
        return json.dumps(self.flat(), sort_keys=True, indent=1) + "\n"

    def record_outputs(self, out_dir):
        """Checksum every file under ``out_dir`` except the manifest itself."""
        self.outputs = {}
        for root, _, files in os.walk(out_dir):
            for name in files:
                full = os.path.join(root, name)
                rel = os.path.relpath(full, out_dir).replace(os.sep, "/")
                if rel != MANIFEST_NAME:
                    self.outputs[rel] = sha256_file(full)
        self.outputs = dict(sorted(self.outputs.items()))

    def write(self, out_dir):
        path = os.path.join(out_dir, MANIFEST_NAME)
        with open(path, "w") as fh:
            fh.write(self.to_json())
        return path

    @classmethod
    def from_flat(cls, data: dict):
        params = {k[6:]: v for k, v in data.items() if k.startswith("param.")}
        outputs = {k[7:]: v for k, v in data.items() if k.startswith("sha256.")}
        return cls(data["command"], params, data.get("seed"), data.get("rng"),
                   data.get("version", ""), outputs)

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls.from_flat(json.load(fh))
