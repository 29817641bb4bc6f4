"""Bit-exact binary serialization for models, calibration sets, and datasets.

All multi-byte values are little-endian. Three formats, each opened by an
8-byte magic string:

ModelFile ("ICADMDL1")
    magic, format version (u32), layer count (u32), then per layer
    in-dim (u32), out-dim (u32), activation code (u8), bias flag (u8);
    model kind (u8: 1=vae, 2=svdd); kind extras — vae: encoder layer count
    (u32) and latent dim (u32); svdd: weight decay (f64), center length
    (u32) and center values (f64); finally the parameter payload as f32 in
    layer order, weights row-major, bias after its weights.

CalibrationFile ("ICADCAL1")
    magic, scorer kind code (u8: 1=knn, 2=kde, 3=vae, 4=svdd), scorer
    fingerprint (8 bytes), count (u32), sorted scores as f64. Scores stay at
    full precision because p-value boundaries are tie-sensitive.

DatasetFile ("ICADDAT1")
    magic, count (u32), dimension (u32), corruption-level flag (u8),
    examples as f32 row-major, then (if flagged) one f64 level per example.

Writes go to a temp file in the target directory and are renamed into
place. A plain key=value text format carries run configuration.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .conformal import CalibrationSet, FingerprintMismatchError
from .models import SvddModel, VaeModel
from .neural import ACTIVATIONS, Array, DenseLayer, Mlp

MAGIC_MODEL = b"ICADMDL1"
MAGIC_CALIBRATION = b"ICADCAL1"
MAGIC_DATASET = b"ICADDAT1"
FORMAT_VERSION = 1

MODEL_KIND_VAE = 1
MODEL_KIND_SVDD = 2

SCORER_CODES = {"knn": 1, "kde": 2, "vae": 3, "svdd": 4}
SCORER_NAMES = {v: k for k, v in SCORER_CODES.items()}


class PersistenceError(Exception):
    code = "persistence"


class BadMagicError(PersistenceError):
    code = "bad_magic"


class VersionMismatchError(PersistenceError):
    code = "version_mismatch"


class TruncatedPayloadError(PersistenceError):
    code = "truncated_payload"


class UnsortedScoresError(PersistenceError):
    code = "unsorted_scores"


class FormatError(PersistenceError):
    code = "format"


def _atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(
                f"{self.what}: expected {n} more bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} bytes of trailing data")


def _layer_descriptor(layer: DenseLayer) -> bytes:
    return struct.pack(
        "<IIBB",
        layer.in_dim,
        layer.out_dim,
        ACTIVATIONS.index(layer.activation),
        1 if layer.bias is not None else 0,
    )


def _layer_payload(layer: DenseLayer) -> bytes:
    out = layer.weights.astype("<f4").tobytes()
    if layer.bias is not None:
        out += layer.bias.astype("<f4").tobytes()
    return out


def _read_layers(reader: _Reader, descriptors: list[tuple[int, int, int, int]]) -> list[DenseLayer]:
    layers = []
    for in_dim, out_dim, act_code, bias_flag in descriptors:
        if act_code >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation code {act_code}")
        w = np.frombuffer(reader.take(in_dim * out_dim * 4), dtype="<f4")
        w = w.reshape(out_dim, in_dim).astype(np.float64)
        b = None
        if bias_flag:
            b = np.frombuffer(reader.take(out_dim * 4), dtype="<f4").astype(np.float64)
        layers.append(DenseLayer(w, b, ACTIVATIONS[act_code]))
    return layers


def save_model(path: str | Path, model: VaeModel | SvddModel) -> None:
    if isinstance(model, VaeModel):
        nets = [model.encoder, model.decoder]
        kind = MODEL_KIND_VAE
        extras = struct.pack("<II", len(model.encoder.layers), model.latent_dim)
    elif isinstance(model, SvddModel):
        if model.center is None:
            raise FormatError("cannot save an SVDD model without an initialized center")
        nets = [model.mapper]
        kind = MODEL_KIND_SVDD
        center = np.asarray(model.center, dtype="<f8")
        extras = struct.pack("<dI", model.weight_decay, center.size) + center.tobytes()
    else:
        raise FormatError(f"unsupported model type {type(model).__name__}")
    layers = [layer for net in nets for layer in net.layers]
    if not layers:
        raise FormatError("model has no layers")
    parts = [MAGIC_MODEL, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(layers))]
    parts.extend(_layer_descriptor(layer) for layer in layers)
    parts.append(struct.pack("<B", kind))
    parts.append(extras)
    parts.extend(_layer_payload(layer) for layer in layers)
    _atomic_write(path, b"".join(parts))


def load_model(path: str | Path) -> VaeModel | SvddModel:
    reader = _Reader(Path(path).read_bytes(), f"model file {path}")
    if reader.take(8) != MAGIC_MODEL:
        raise BadMagicError(f"{path} is not a model file")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (layer_count,) = reader.unpack("<I")
    if layer_count < 1:
        raise FormatError(f"{path}: model has no layers")
    descriptors = [reader.unpack("<IIBB") for _ in range(layer_count)]
    (kind,) = reader.unpack("<B")
    if kind == MODEL_KIND_VAE:
        enc_count, latent_dim = reader.unpack("<II")
        if not 0 < enc_count < layer_count:
            raise FormatError(f"{path}: bad encoder layer count {enc_count}")
        layers = _read_layers(reader, descriptors)
        reader.done()
        encoder = Mlp(layers[:enc_count])
        decoder = Mlp(layers[enc_count:])
        return VaeModel(encoder, decoder, latent_dim)
    if kind == MODEL_KIND_SVDD:
        weight_decay, center_len = reader.unpack("<dI")
        center = np.frombuffer(reader.take(center_len * 8), dtype="<f8").astype(np.float64)
        layers = _read_layers(reader, descriptors)
        reader.done()
        model = SvddModel(Mlp(layers), weight_decay)
        center.setflags(write=False)
        model.center = center
        return model
    raise FormatError(f"{path}: unknown model kind {kind}")


def save_calibration(path: str | Path, cal: CalibrationSet) -> None:
    if cal.scorer_kind not in SCORER_CODES:
        raise FormatError(f"unknown scorer kind {cal.scorer_kind!r}")
    parts = [
        MAGIC_CALIBRATION,
        struct.pack("<B", SCORER_CODES[cal.scorer_kind]),
        cal.fingerprint,
        struct.pack("<I", len(cal)),
        cal.scores.astype("<f8").tobytes(),
    ]
    _atomic_write(path, b"".join(parts))


def load_calibration(path: str | Path, scorer=None) -> CalibrationSet:
    """Read a calibration file; if a scorer is given, enforce the binding."""
    reader = _Reader(Path(path).read_bytes(), f"calibration file {path}")
    if reader.take(8) != MAGIC_CALIBRATION:
        raise BadMagicError(f"{path} is not a calibration file")
    (code,) = reader.unpack("<B")
    if code not in SCORER_NAMES:
        raise FormatError(f"{path}: unknown scorer code {code}")
    fingerprint = reader.take(8)
    (count,) = reader.unpack("<I")
    if count < 1:
        raise FormatError(f"{path}: empty calibration set")
    scores = np.frombuffer(reader.take(count * 8), dtype="<f8").astype(np.float64)
    reader.done()
    if np.any(np.diff(scores) < 0):
        raise UnsortedScoresError(f"{path}: calibration scores are not sorted")
    cal = CalibrationSet(scores, SCORER_NAMES[code], fingerprint)
    if scorer is not None:
        if scorer.kind != cal.scorer_kind or scorer.fingerprint() != cal.fingerprint:
            raise FingerprintMismatchError(
                f"{path}: calibration does not belong to the provided {scorer.kind!r} scorer"
            )
    return cal


def save_dataset(path: str | Path, examples: Array, r_values: Array | None = None) -> None:
    examples = np.asarray(examples, dtype=np.float64)
    if examples.ndim != 2 or examples.shape[0] < 1:
        raise FormatError("dataset must be a nonempty 2-D array")
    count, dim = examples.shape
    has_r = r_values is not None
    parts = [
        MAGIC_DATASET,
        struct.pack("<IIB", count, dim, 1 if has_r else 0),
        examples.astype("<f4").tobytes(),
    ]
    if has_r:
        r_arr = np.asarray(r_values, dtype="<f8")
        if r_arr.shape != (count,):
            raise FormatError("need one corruption level per example")
        parts.append(r_arr.tobytes())
    _atomic_write(path, b"".join(parts))


def load_dataset(path: str | Path) -> tuple[Array, Array | None]:
    reader = _Reader(Path(path).read_bytes(), f"dataset file {path}")
    if reader.take(8) != MAGIC_DATASET:
        raise BadMagicError(f"{path} is not a dataset file")
    count, dim, has_r = reader.unpack("<IIB")
    if count < 1 or dim < 1:
        raise FormatError(f"{path}: empty dataset")
    x = np.frombuffer(reader.take(count * dim * 4), dtype="<f4")
    x = x.reshape(count, dim).astype(np.float64)
    r = None
    if has_r:
        r = np.frombuffer(reader.take(count * 8), dtype="<f8").astype(np.float64)
    reader.done()
    return x, r


def save_config(path: str | Path, config: Mapping[str, object]) -> None:
    lines = [f"{key}={config[key]}" for key in sorted(config)]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def load_config(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
