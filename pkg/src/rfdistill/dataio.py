"""Wire formats, checkpoints, splits, and run manifests.

Datasets travel as JSONL: one PairedRecord per line with the raw frame,
the 512-float teacher embedding, an optional label, and a timestamp.
Anchors travel as one record per class. Floats are serialized with
Python's shortest round-trip representation, so a load/save cycle
preserves every numeric value exactly.

Checkpoints are a single binary file: a magic tag, a version, a JSON
header (config echo, preprocessing state, tensor directory), then the raw
float64 tensor bytes in header order. Save -> load -> save is bitwise
stable. All writes here go through a temp-file-then-rename so readers
never observe partial files.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import sys
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .classify import TextAnchor
from .encoder import EncoderConfig, EncoderParams
from .errors import DuplicateClassError, SchemaError
from .pipeline import ModelBundle, PairedSample, PreprocessConfig
from .pointcloud import FEATURE_DIM, PointFrame

logger = logging.getLogger("rfdistill")

EMBEDDING_DIM = 512
CHECKPOINT_MAGIC = b"RFDCKPT1"


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# paired records


def save_paired(samples: Sequence[PairedSample], path):
    lines = []
    for s in samples:
        record = {
            "frame": [[float(v) for v in row] for row in s.frame.data],
            "teacher_embedding": [float(v) for v in s.teacher_embedding],
            "timestamp_ms": int(s.timestamp_ms),
        }
        if s.label is not None:
            record["label"] = s.label
        lines.append(json.dumps(record))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def _finite_floats(values, line, what):
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"non-finite value in {what}", line=line)
    return arr


def load_paired(path, embedding_dim: int = EMBEDDING_DIM,
                window_ms: int = 200) -> list[PairedSample]:
    """Load and validate a paired JSONL file; order-preserving.

    Malformed lines raise SchemaError with the 1-based line number. An
    empty file is a warning, not an error.
    """
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON: {e}", line=lineno) from e
            if not isinstance(rec, dict):
                raise SchemaError("record must be a JSON object", line=lineno)
            for key in ("frame", "teacher_embedding", "timestamp_ms"):
                if key not in rec:
                    raise SchemaError(f"missing field {key!r}", line=lineno)
            emb = _finite_floats(rec["teacher_embedding"], lineno,
                                 "teacher_embedding")
            if emb.shape != (embedding_dim,):
                raise SchemaError(
                    f"embedding has {emb.size} values, expected {embedding_dim}",
                    line=lineno)
            frame_rows = rec["frame"]
            if not isinstance(frame_rows, list) or any(
                    not isinstance(r, list) or len(r) != FEATURE_DIM
                    for r in frame_rows):
                raise SchemaError(
                    f"frame rows must be {FEATURE_DIM}-tuples", line=lineno)
            try:
                frame = PointFrame(
                    _finite_floats(frame_rows, lineno, "frame").reshape(
                        len(frame_rows), FEATURE_DIM),
                    timestamp_ms=int(rec["timestamp_ms"]),
                    window_ms=window_ms)
            except ValueError as e:
                raise SchemaError(str(e), line=lineno) from e
            label = rec.get("label")
            if label is not None and not isinstance(label, str):
                raise SchemaError("label must be a string", line=lineno)
            samples.append(PairedSample(frame=frame, teacher_embedding=emb,
                                        label=label,
                                        timestamp_ms=int(rec["timestamp_ms"])))
    if not samples:
        logger.warning("loaded empty dataset from %s", path)
    return samples


# ---------------------------------------------------------------------------
# anchor records


def save_anchors(anchors: Sequence[TextAnchor], path):
    lines = [json.dumps({
        "class": a.class_name,
        "prompt": a.prompt,
        "embedding": [float(v) for v in a.embedding],
    }) for a in anchors]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_anchors(path, embedding_dim: int = EMBEDDING_DIM) -> list[TextAnchor]:
    anchors = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON: {e}", line=lineno) from e
            for key in ("class", "prompt", "embedding"):
                if key not in rec:
                    raise SchemaError(f"missing field {key!r}", line=lineno)
            name = rec["class"]
            if name in seen:
                raise DuplicateClassError(f"duplicate class {name!r} at line {lineno}")
            seen.add(name)
            emb = _finite_floats(rec["embedding"], lineno, "embedding")
            if emb.shape != (embedding_dim,):
                raise SchemaError(
                    f"embedding has {emb.size} values, expected {embedding_dim}",
                    line=lineno)
            if np.linalg.norm(emb) == 0.0:
                raise SchemaError(f"anchor {name!r} embedding is all zero",
                                  line=lineno)
            anchors.append(TextAnchor(class_name=name, prompt=rec["prompt"],
                                      embedding=emb))
    if not anchors:
        logger.warning("loaded empty anchor set from %s", path)
    return anchors


# ---------------------------------------------------------------------------
# contiguous time split


@dataclass(frozen=True)
class SplitSpec:
    """Contiguous time-block split (no RNG anywhere).

    ratio = (9, 1) puts the first 9/10 of the timeline in the first block
    (the fit/validation pool) and the rest in the second (held-out test).
    """

    ratio: tuple = (9, 1)

    def __post_init__(self):
        a, b = self.ratio
        if a < 0 or b < 0 or a + b <= 0:
            raise ValueError(f"bad split ratio {self.ratio}")

    def split(self, samples: Sequence[PairedSample]):
        samples = list(samples)
        stamps = [s.timestamp_ms for s in samples]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            # keep blocks contiguous in time even for unsorted files
            order = np.argsort(np.asarray(stamps), kind="stable")
            samples = [samples[i] for i in order]
        a, b = self.ratio
        n_first = len(samples) * a // (a + b)
        return samples[:n_first], samples[n_first:]


def parse_ratio(text: str) -> tuple:
    try:
        a, b = (int(part) for part in text.split(":"))
    except ValueError as e:
        raise ValueError(f"split ratio must look like '9:1', got {text!r}") from e
    return (a, b)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, bundle: ModelBundle):
    params = bundle.params
    tensor_names = list(params.tensors)
    state_names = list(params.state)
    header = {
        "format_version": 1,
        "encoder_config": asdict(params.config),
        "mode": params.mode,
        "preprocess": asdict(bundle.preprocess),
        "intensity_mean": bundle.intensity_mean,
        "intensity_std": bundle.intensity_std,
        "tensors": [{"name": n, "dtype": params.tensors[n].dtype.name,
                     "shape": list(params.tensors[n].shape)}
                    for n in tensor_names],
        "state": [{"name": n, "dtype": params.state[n].dtype.name,
                   "shape": list(params.state[n].shape)}
                  for n in state_names],
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    blob = [CHECKPOINT_MAGIC, struct.pack("<I", len(header_bytes)), header_bytes]
    for n in tensor_names:
        blob.append(np.ascontiguousarray(params.tensors[n]).tobytes())
    for n in state_names:
        blob.append(np.ascontiguousarray(params.state[n]).tobytes())
    atomic_write_bytes(path, b"".join(blob))


def load_checkpoint(path) -> ModelBundle:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise SchemaError(f"{path} is not a checkpoint (bad magic)")
    (header_len,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + header_len].decode("utf-8"))
    if header.get("format_version") != 1:
        raise SchemaError(f"unsupported checkpoint version {header.get('format_version')}")

    cfg_dict = dict(header["encoder_config"])
    for key in ("stn_hidden", "phi_hidden", "psi_hidden"):
        cfg_dict[key] = tuple(cfg_dict[key])
    config = EncoderConfig(**cfg_dict)

    offset = 12 + header_len

    def read_block(entries):
        nonlocal offset
        out = {}
        for entry in entries:
            shape = tuple(entry["shape"])
            dtype = np.dtype(entry["dtype"]).newbyteorder("<")
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype=dtype, count=count,
                                offset=offset).reshape(shape).copy()
            if not np.all(np.isfinite(arr)):
                raise SchemaError(f"tensor {entry['name']!r} has non-finite values")
            out[entry["name"]] = arr
            offset += count * dtype.itemsize
        return out

    tensors = read_block(header["tensors"])
    state = read_block(header["state"])
    params = EncoderParams(config, tensors, state, mode=header["mode"])
    preprocess = PreprocessConfig(**header["preprocess"])
    return ModelBundle(params, preprocess,
                       float(header["intensity_mean"]),
                       float(header["intensity_std"]))


# ---------------------------------------------------------------------------
# run manifests


def write_manifest(path, command: str, args: dict, inputs: Sequence = (),
                   outputs: Sequence = ()):
    """Record everything needed to reproduce a CLI run."""
    manifest = {
        "command": command,
        "args": {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in args.items()},
        "inputs": {str(p): sha256_file(p) for p in inputs if Path(p).exists()},
        "outputs": [str(p) for p in outputs],
        "python": sys.version.split()[0],
        "numpy": np.__version__,
    }
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
