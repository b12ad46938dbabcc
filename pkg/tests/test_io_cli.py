import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from rfdistill import dataio
from rfdistill.classify import TextAnchor
from rfdistill.dataio import (SplitSpec, load_anchors, load_paired,
                              load_checkpoint, parse_ratio, save_anchors,
                              save_checkpoint, save_paired)

from rfdistill.encoder import EncoderConfig, init_params
from rfdistill.errors import DuplicateClassError, SchemaError
from rfdistill.pipeline import ModelBundle, PairedSample, PreprocessConfig
from rfdistill.pointcloud import PointFrame


def make_samples(n=4, dim=512, labeled=True, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        frame = PointFrame(
            np.column_stack([rng.normal(size=(6, 3)),
                             rng.uniform(-1, 1, size=(6, 1)),
                             rng.uniform(0, 5, size=(6, 1))]),
            timestamp_ms=i * 200)
        samples.append(PairedSample(
            frame=frame, teacher_embedding=rng.normal(size=dim),
            label=f"cls_{i % 2}" if labeled else None, timestamp_ms=i * 200))
    return samples


class TestPairedRoundTrip:
    def test_values_survive_exactly(self, tmp_path):
        samples = make_samples()
        path = tmp_path / "pairs.jsonl"
        save_paired(samples, path)
        loaded = load_paired(path)
        assert len(loaded) == len(samples)
        for a, b in zip(samples, loaded):
            np.testing.assert_array_equal(a.frame.data, b.frame.data)
            np.testing.assert_array_equal(a.teacher_embedding,
                                          b.teacher_embedding)
            assert a.label == b.label and a.timestamp_ms == b.timestamp_ms

    def test_wrong_embedding_length_names_the_line(self, tmp_path):
        samples = make_samples(n=3)
        path = tmp_path / "pairs.jsonl"
        save_paired(samples, path)
        lines = path.read_text().splitlines()
        rec = json.loads(lines[1])
        rec["teacher_embedding"] = rec["teacher_embedding"][:511]
        lines[1] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(SchemaError) as err:
            load_paired(path)
        assert err.value.line == 2

    def test_non_finite_value_rejected(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        rec = {"frame": [[0, 0, 0, 1, 1]],
               "teacher_embedding": [float("nan")] + [0.0] * 511,
               "timestamp_ms": 0}
        path.write_text(json.dumps(rec).replace("NaN", "NaN") + "\n")
        with pytest.raises(SchemaError):
            load_paired(path)

    def test_empty_file_is_a_warning_not_an_error(self, tmp_path, caplog):
        path = tmp_path / "pairs.jsonl"
        path.write_text("")
        with caplog.at_level("WARNING", logger="rfdistill"):
            assert load_paired(path) == []
        assert any("empty dataset" in r.message for r in caplog.records)

    def test_invalid_json_names_the_line(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text("{not json}\n")
        with pytest.raises(SchemaError) as err:
            load_paired(path)
        assert err.value.line == 1

    def test_empty_frames_survive_round_trip(self, tmp_path):
        s = make_samples(1)[0]
        empty = PairedSample(frame=PointFrame(np.empty((0, 5))),
                             teacher_embedding=s.teacher_embedding,
                             label=None, timestamp_ms=7)
        path = tmp_path / "pairs.jsonl"
        save_paired([empty], path)
        loaded = load_paired(path)
        assert len(loaded[0].frame) == 0


class TestAnchorsRoundTrip:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        anchors = [TextAnchor(f"c{i}", f"A person c{i}", rng.normal(size=512))
                   for i in range(3)]
        path = tmp_path / "anchors.jsonl"
        save_anchors(anchors, path)
        loaded = load_anchors(path)
        for a, b in zip(anchors, loaded):
            assert a.class_name == b.class_name and a.prompt == b.prompt
            np.testing.assert_array_equal(a.embedding, b.embedding)

    def test_duplicate_class_rejected(self, tmp_path):
        rng = np.random.default_rng(2)
        path = tmp_path / "anchors.jsonl"
        rec = {"class": "dup", "prompt": "p",
               "embedding": list(rng.normal(size=512))}
        path.write_text(json.dumps(rec) + "\n" + json.dumps(rec) + "\n")
        with pytest.raises(DuplicateClassError):
            load_anchors(path)


class TestSplitSpec:
    def test_nine_to_one(self):
        samples = make_samples(n=20)
        val, test = SplitSpec((9, 1)).split(samples)
        assert len(val) == 18 and len(test) == 2
        assert max(s.timestamp_ms for s in val) < min(s.timestamp_ms for s in test)

    def test_no_overlap_and_reproducible(self):
        samples = make_samples(n=10)
        a = SplitSpec((9, 1)).split(samples)
        b = SplitSpec((9, 1)).split(samples)
        assert [s.timestamp_ms for s in a[0]] == [s.timestamp_ms for s in b[0]]
        ids_a = {id(s) for s in a[0]}
        assert all(id(s) not in ids_a for s in a[1])

    def test_unsorted_input_is_time_ordered_first(self):
        samples = make_samples(n=6)[::-1]
        val, test = SplitSpec((1, 1)).split(samples)
        assert all(a.timestamp_ms <= b.timestamp_ms
                   for a, b in zip(val, val[1:]))
        assert max(s.timestamp_ms for s in val) <= min(s.timestamp_ms for s in test)

    def test_parse_ratio(self):
        assert parse_ratio("9:1") == (9, 1)
        with pytest.raises(ValueError):
            parse_ratio("banana")
        with pytest.raises(ValueError):
            SplitSpec((0, 0))


class TestCheckpoint:
    def test_save_load_save_is_bitwise_identical(self, tmp_path):
        cfg = EncoderConfig(p_fixed=8, d_out=16, stn_hidden=(4,), d_model=8,
                            phi_hidden=(8,), psi_hidden=(8,), dtype="float32")
        params = init_params(cfg, seed=3)
        params.state["phi0.bn.mean"] += 0.25
        bundle = ModelBundle(params, PreprocessConfig(v_thresh=0.4, p_fixed=8,
                                                      seed=9),
                             intensity_mean=1.5, intensity_std=2.5)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(p1, bundle)
        loaded = load_checkpoint(p1)
        save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_preserves_everything(self, tmp_path):
        cfg = EncoderConfig(p_fixed=8, d_out=16, stn_hidden=(4,), d_model=8,
                            phi_hidden=(8,), psi_hidden=(8,), dtype="float64")
        params = init_params(cfg, seed=3)
        params.mode = "eval"
        bundle = ModelBundle(params, PreprocessConfig(0.8, 8, 2), 0.1, 0.9)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, bundle)
        loaded = load_checkpoint(path)
        assert loaded.params.config == cfg
        assert loaded.params.mode == "eval"
        assert loaded.preprocess == bundle.preprocess
        assert loaded.intensity_mean == 0.1 and loaded.intensity_std == 0.9
        for key, val in params.tensors.items():
            np.testing.assert_array_equal(loaded.params.tensors[key], val)
            assert loaded.params.tensors[key].dtype == val.dtype
        for key, val in params.state.items():
            np.testing.assert_array_equal(loaded.params.state[key], val)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(SchemaError):
            load_checkpoint(path)


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "rfdistill", *args],
                          capture_output=True, text=True)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    r = run_cli("synth-gen", "--classes", "3", "--per-class", "10",
                "--seed", "3", "--out", str(out),
                "--subject-points", "24", "--static-points", "8")
    assert r.returncode == 0, r.stderr
    return out


class TestCLI:
    def test_synth_gen_outputs(self, synth_dir):
        assert (synth_dir / "pairs.jsonl").exists()
        assert (synth_dir / "anchors.jsonl").exists()
        summary = json.loads((synth_dir / "summary.json").read_text())
        assert summary["n_samples"] == 30
        assert summary["oracle_zero_shot_bound"] >= 0.99
        manifest = json.loads((synth_dir / "manifest.json").read_text())
        assert manifest["command"] == "synth-gen"

    def test_train_epochs_zero_equals_initialization(self, synth_dir, tmp_path):
        ckpt = tmp_path / "init.ckpt"
        r = run_cli("train", "--data", str(synth_dir / "pairs.jsonl"),
                    "--anchors", str(synth_dir / "anchors.jsonl"),
                    "--epochs", "0", "--seed", "11", "--out", str(ckpt),
                    "--p-fixed", "16")
        assert r.returncode == 0, r.stderr
        bundle = load_checkpoint(ckpt)
        reference = init_params(bundle.params.config, seed=11)
        for key, val in reference.tensors.items():
            np.testing.assert_array_equal(bundle.params.tensors[key], val)

    def test_pipeline_train_then_eval(self, synth_dir, tmp_path):
        ckpt = tmp_path / "model.ckpt"
        r = run_cli("train", "--data", str(synth_dir / "pairs.jsonl"),
                    "--anchors", str(synth_dir / "anchors.jsonl"),
                    "--epochs", "1", "--batch", "8", "--seed", "1",
                    "--out", str(ckpt), "--p-fixed", "16")
        assert r.returncode == 0, r.stderr
        metrics_path = Path(str(ckpt) + ".metrics.jsonl")
        assert metrics_path.exists()
        record = json.loads(metrics_path.read_text().splitlines()[0])
        assert {"epoch", "ckd_loss", "wall_ms"} <= set(record)
        assert "val_zero_shot_acc" in record

        out = tmp_path / "eval"
        r = run_cli("eval-zero-shot", "--data", str(synth_dir / "pairs.jsonl"),
                    "--anchors", str(synth_dir / "anchors.jsonl"),
                    "--ckpt", str(ckpt), "--out", str(out))
        assert r.returncode == 0, r.stderr
        summary = json.loads((out / "summary.json").read_text())
        assert "accuracy" in summary
        header = (out / "confusion.csv").read_text().splitlines()[0]
        assert header.startswith("class,")

        few = tmp_path / "few"
        r = run_cli("eval-few-shot", "--data", str(synth_dir / "pairs.jsonl"),
                    "--anchors", str(synth_dir / "anchors.jsonl"),
                    "--ckpt", str(ckpt), "--out", str(few),
                    "--shots", "2", "--seed", "4")
        assert r.returncode == 0, r.stderr
        assert json.loads((few / "summary.json").read_text())["mode"] == "2-shot"

        diag = tmp_path / "corr.json"
        r = run_cli("diag-correlation", "--data", str(synth_dir / "pairs.jsonl"),
                    "--ckpt", str(ckpt), "--out", str(diag))
        assert r.returncode == 0, r.stderr
        payload = json.loads(diag.read_text())
        assert 0.0 <= payload["mean_abs_diff"] <= 2.0
        assert len(payload["r_teacher"]) == 512

    def test_filter_command(self, synth_dir, tmp_path):
        out = tmp_path / "filtered.jsonl"
        r = run_cli("filter", "--v-thresh", "0.0",
                    "--in", str(synth_dir / "pairs.jsonl"), "--out", str(out))
        assert r.returncode == 0, r.stderr
        filtered = load_paired(out)
        original = load_paired(synth_dir / "pairs.jsonl")
        assert all(len(f.frame) == len(o.frame) - 8
                   for f, o in zip(filtered, original))

    def test_usage_error_exit_code(self, synth_dir, tmp_path):
        r = run_cli("eval-few-shot", "--data", str(synth_dir / "pairs.jsonl"),
                    "--anchors", str(synth_dir / "anchors.jsonl"),
                    "--ckpt", "whatever", "--out", str(tmp_path / "x"),
                    "--shots", "0")
        assert r.returncode == 2

    def test_unknown_flag_exit_code(self):
        r = run_cli("train", "--nonsense")
        assert r.returncode == 2

    def test_missing_file_exit_code(self, tmp_path):
        r = run_cli("train", "--data", str(tmp_path / "nope.jsonl"),
                    "--out", str(tmp_path / "c.ckpt"))
        assert r.returncode == 3
        assert "data error" in r.stderr

    def test_checkpoint_cadence_writes_epoch_snapshots(self, synth_dir, tmp_path):
        ckpt = tmp_path / "cadence.ckpt"
        r = run_cli("train", "--data", str(synth_dir / "pairs.jsonl"),
                    "--epochs", "2", "--batch", "8", "--seed", "1",
                    "--out", str(ckpt), "--p-fixed", "16",
                    "--checkpoint-every", "1")
        assert r.returncode == 0, r.stderr
        for epoch in (1, 2):
            snap = load_checkpoint(f"{ckpt}.epoch{epoch}")
            assert snap.params.mode == "eval"

    def test_train_writes_manifest_with_hashes(self, synth_dir, tmp_path):
        ckpt = tmp_path / "m.ckpt"
        r = run_cli("train", "--data", str(synth_dir / "pairs.jsonl"),
                    "--epochs", "0", "--out", str(ckpt), "--p-fixed", "16")
        assert r.returncode == 0, r.stderr
        manifest = json.loads(Path(str(ckpt) + ".manifest.json").read_text())
        assert manifest["args"]["seed"] == 0
        key = str(synth_dir / "pairs.jsonl")
        assert len(manifest["inputs"][key]) == 64
