"""JSONL wire formats shared with the radar pipeline.

The bridge only ever talks to the student side through these files:
paired records (frame + teacher embedding + optional label + timestamp)
and anchor records (class + prompt + embedding, L2-normalized at write
time). Floats serialize with Python's shortest round-trip representation.
"""
from __future__ import annotations

import csv
import json
import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

EMBED_DIM = 512


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonl(records) -> str:
    lines = [json.dumps(r) for r in records]
    return "\n".join(lines) + ("\n" if lines else "")


def write_anchors(entries, path):
    """entries: iterable of (class_name, prompt, embedding). Embeddings are
    L2-normalized here so downstream consumers can rely on unit rows."""
    records = []
    for name, prompt, emb in entries:
        emb = np.asarray(emb, dtype=np.float64)
        norm = np.linalg.norm(emb)
        if norm == 0.0:
            raise ValueError(f"anchor {name!r} has a zero embedding")
        records.append({"class": name, "prompt": prompt,
                        "embedding": [float(v) for v in emb / norm]})
    atomic_write_text(path, _jsonl(records))


def write_image_embeddings(entries, path):
    """entries: iterable of (path, embedding)."""
    records = [{"path": str(p), "embedding": [float(v) for v in emb]}
               for p, emb in entries]
    atomic_write_text(path, _jsonl(records))


def load_image_embeddings(path) -> dict:
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            table[rec["path"]] = np.asarray(rec["embedding"], dtype=np.float64)
    return table


def load_radar_frames(path) -> list:
    """Radar-side records: {"frame": [[x,y,z,d,i],...], "timestamp_ms": int,
    "label": optional}."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "frame" not in rec or "timestamp_ms" not in rec:
                raise ValueError(f"line {lineno}: radar record needs "
                                 f"'frame' and 'timestamp_ms'")
            records.append(rec)
    return records


def load_camera_csv(path):
    """CSV with header timestamp_ms,path -> (timestamps list, paths list)."""
    stamps, paths = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            stamps.append(int(row["timestamp_ms"]))
            paths.append(row["path"])
    return stamps, paths


def export_paired(radar_records: Sequence[dict], camera_paths: Sequence[str],
                  match_indices, embeddings: dict, out_path):
    """One paired record per radar frame, using its matched image's
    embedding. Records whose image has no embedding become error entries;
    the rest are still written."""
    records, errors = [], []
    for rec, idx in zip(radar_records, match_indices):
        image_path = camera_paths[int(idx)]
        emb = embeddings.get(image_path)
        if emb is None:
            errors.append({"timestamp_ms": rec["timestamp_ms"],
                           "image": image_path,
                           "error": "missing embedding"})
            continue
        out = {"frame": rec["frame"],
               "teacher_embedding": [float(v) for v in emb],
               "timestamp_ms": int(rec["timestamp_ms"])}
        if rec.get("label") is not None:
            out["label"] = rec["label"]
        records.append(out)
    atomic_write_text(out_path, _jsonl(records))
    return len(records), errors
