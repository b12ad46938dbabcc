"""Command-line surface.

Exit codes: 0 success, 2 usage error, 3 data error, 4 runtime error.
Every run writes a manifest (flags, seeds, input hashes) next to its
outputs so results can be reproduced byte for byte.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import classify, dataio, distill, synthetic
from .encoder import EncoderConfig
from .errors import (DuplicateClassError, InsufficientSamplesError,
                     MissingSupportError, NoTrainableDataError, RFDistillError,
                     SchemaError, UnknownLabelError, UsageError)
from .pointcloud import doppler_filter

DATA_ERRORS = (SchemaError, DuplicateClassError, NoTrainableDataError,
               UnknownLabelError, MissingSupportError,
               InsufficientSamplesError, FileNotFoundError)


def _positive(kind, name):
    def convert(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a {kind.__name__}")
        if value <= 0:
            raise argparse.ArgumentTypeError(f"{name} must be > 0")
        return value
    return convert


def _non_negative(kind, name):
    def convert(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a {kind.__name__}")
        if value < 0:
            raise argparse.ArgumentTypeError(f"{name} must be >= 0")
        return value
    return convert


def _write_eval_outputs(result: classify.EvalResult, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = ["class," + ",".join(result.class_names)]
    for name, row in zip(result.class_names, result.confusion):
        rows.append(name + "," + ",".join(repr(float(v)) for v in row))
    dataio.atomic_write_text(out_dir / "confusion.csv", "\n".join(rows) + "\n")
    dataio.atomic_write_text(
        out_dir / "summary.json",
        json.dumps(result.summary_dict(), indent=2, sort_keys=True) + "\n")


def _manifest_args(args) -> dict:
    skip = {"func", "command"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def cmd_synth_gen(args) -> int:
    spec = synthetic.SyntheticSpec(
        n_classes=args.classes,
        samples_per_class=args.per_class,
        seed=args.seed,
        embedding_noise_sigma=args.sigma,
        n_static_points=args.static_points,
        n_dynamic_distractors=args.distractors,
        distractor_points=args.distractor_points,
        subject_points=args.subject_points,
        embedding_dim=args.dim,
    )
    samples, anchors = synthetic.gen_dataset(spec)
    matrix = classify.AnchorMatrix.from_anchors(anchors)
    correct = sum(1 for s in samples
                  if classify.zero_shot(s.teacher_embedding, matrix)[0] == s.label)
    bound = correct / len(samples)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs_path = out / "pairs.jsonl"
    anchors_path = out / "anchors.jsonl"
    dataio.save_paired(samples, pairs_path)
    dataio.save_anchors(anchors, anchors_path)
    summary = {
        "n_samples": len(samples),
        "n_classes": spec.n_classes,
        "class_names": [a.class_name for a in anchors],
        "oracle_zero_shot_bound": bound,
        "spec": {k: v for k, v in asdict(spec).items() if k != "kinematics"},
    }
    dataio.atomic_write_text(out / "summary.json",
                             json.dumps(summary, indent=2, sort_keys=True) + "\n")
    dataio.write_manifest(out / "manifest.json", "synth-gen",
                          _manifest_args(args),
                          outputs=[pairs_path, anchors_path])
    print(f"wrote {len(samples)} samples, {len(anchors)} anchors -> {out} "
          f"(oracle zero-shot bound {bound:.4f})")
    return 0


def _train_once(samples, anchors, args, loss: str, seed: int,
                metrics_path, v_thresh: float):
    encoder_cfg = EncoderConfig(p_fixed=args.p_fixed, d_out=args.embed_dim,
                                dropout_rate=args.dropout)
    ckd_cfg = distill.CKDConfig(tau=args.tau, batch_size=args.batch,
                                direction=args.direction.replace("-", "_"))
    train_cfg = distill.TrainConfig(learning_rate=args.lr, epochs=args.epochs,
                                    seed=seed,
                                    checkpoint_every=getattr(args, "checkpoint_every", 0))
    fit_block, holdout = dataio.SplitSpec(dataio.parse_ratio(args.split_ratio)).split(samples)
    labeled_holdout = [s for s in holdout if s.label is not None]
    val = labeled_holdout if (anchors and labeled_holdout) else None
    if metrics_path is not None:
        Path(metrics_path).unlink(missing_ok=True)
    hook = None
    out_path = getattr(args, "out", None)
    if train_cfg.checkpoint_every > 0 and out_path:
        def hook(epoch, live_bundle):
            snap = live_bundle.copy()
            snap.params.mode = "eval"
            dataio.save_checkpoint(f"{out_path}.epoch{epoch}", snap)
    bundle, metrics = distill.train(
        fit_block, encoder_cfg, ckd_cfg, train_cfg,
        val_samples=val, anchors=anchors, v_thresh=v_thresh, loss=loss,
        log_path=metrics_path, checkpoint_hook=hook)
    return bundle, metrics


def cmd_train(args) -> int:
    samples = dataio.load_paired(args.data, embedding_dim=args.embed_dim)
    anchors = (dataio.load_anchors(args.anchors, embedding_dim=args.embed_dim)
               if args.anchors else None)
    metrics_path = args.metrics or (str(args.out) + ".metrics.jsonl")
    t0 = time.perf_counter()
    bundle, metrics = _train_once(samples, anchors, args, args.loss,
                                  args.seed, metrics_path, args.v_thresh)
    dataio.save_checkpoint(args.out, bundle)
    dataio.write_manifest(str(args.out) + ".manifest.json", "train",
                          _manifest_args(args),
                          inputs=[p for p in (args.data, args.anchors) if p],
                          outputs=[args.out, metrics_path])
    elapsed = time.perf_counter() - t0
    last = metrics[-1] if metrics else {}
    print(f"trained {args.epochs} epochs in {elapsed:.1f}s -> {args.out}"
          + (f" (final val zero-shot acc {last['val_zero_shot_acc']:.4f})"
             if "val_zero_shot_acc" in last else ""))
    return 0


def _load_eval_inputs(args):
    bundle = dataio.load_checkpoint(args.ckpt)
    dim = bundle.params.config.d_out
    samples = dataio.load_paired(args.data, embedding_dim=dim)
    anchors = dataio.load_anchors(args.anchors, embedding_dim=dim)
    if args.v_thresh is not None:
        bundle.preprocess = replace(bundle.preprocess, v_thresh=args.v_thresh)
    return bundle, samples, anchors


def _pick_split(samples, which: str, ratio_text: str):
    val, test = dataio.SplitSpec(dataio.parse_ratio(ratio_text)).split(samples)
    return {"val": val, "test": test, "all": list(samples)}[which]


def cmd_eval_zero_shot(args) -> int:
    bundle, samples, anchors = _load_eval_inputs(args)
    queries = _pick_split(samples, args.split, args.split_ratio)
    result = classify.evaluate(queries, bundle, anchors, mode="zero")
    out = Path(args.out)
    _write_eval_outputs(result, out)
    dataio.write_manifest(out / "manifest.json", "eval-zero-shot",
                          _manifest_args(args),
                          inputs=[args.data, args.anchors, args.ckpt],
                          outputs=[out / "confusion.csv", out / "summary.json"])
    print(f"zero-shot accuracy {result.accuracy:.4f} on {result.n_queries} "
          f"queries ({result.n_dropped} dropped) -> {out}")
    return 0


def cmd_eval_few_shot(args) -> int:
    bundle, samples, anchors = _load_eval_inputs(args)
    support_pool, queries = dataio.SplitSpec(
        dataio.parse_ratio(args.split_ratio)).split(samples)
    labeled_pool = [s for s in support_pool if s.label is not None]
    result = classify.evaluate(
        queries, bundle, anchors, mode=args.shots, seed=args.seed,
        support_pool=labeled_pool,
        few_shot_config=classify.FewShotConfig(gamma=args.gamma))
    out = Path(args.out)
    _write_eval_outputs(result, out)
    dataio.write_manifest(out / "manifest.json", "eval-few-shot",
                          _manifest_args(args),
                          inputs=[args.data, args.anchors, args.ckpt],
                          outputs=[out / "confusion.csv", out / "summary.json"])
    print(f"{args.shots}-shot (gamma={args.gamma}) accuracy {result.accuracy:.4f} "
          f"on {result.n_queries} queries -> {out}")
    return 0


def cmd_diag_correlation(args) -> int:
    bundle = dataio.load_checkpoint(args.ckpt)
    dim = bundle.params.config.d_out
    samples = dataio.load_paired(args.data, embedding_dim=dim)
    queries = _pick_split(samples, args.split, args.split_ratio)
    embedded = classify.embed_labeled(queries, bundle)
    report = distill.correlation_report(embedded.teacher, embedded.embeddings)
    payload = {
        "mean_abs_diff": report.mean_abs_diff,
        "teacher_degenerate_dims": report.teacher_degenerate_dims,
        "student_degenerate_dims": report.student_degenerate_dims,
        "r_teacher": report.r_teacher.tolist(),
        "r_student": report.r_student.tolist(),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.atomic_write_text(out, json.dumps(payload) + "\n")
    if args.heatmap:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(np.abs(report.r_teacher - report.r_student),
                       cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_title("|R_teacher - R_student|")
        fig.colorbar(im, ax=ax)
        fig.savefig(args.heatmap, dpi=120, bbox_inches="tight")
        plt.close(fig)
    dataio.write_manifest(str(out) + ".manifest.json", "diag-correlation",
                          _manifest_args(args),
                          inputs=[args.data, args.ckpt], outputs=[out])
    print(f"mean |R_teacher - R_student| = {report.mean_abs_diff:.4f} -> {out}")
    return 0


def cmd_filter(args) -> int:
    samples = dataio.load_paired(args.in_path, embedding_dim=args.embed_dim)
    filtered = []
    emptied = 0
    for s in samples:
        frame = doppler_filter(s.frame, args.v_thresh)
        if len(frame) == 0:
            emptied += 1
        filtered.append(dataio.PairedSample(
            frame=frame, teacher_embedding=s.teacher_embedding,
            label=s.label, timestamp_ms=s.timestamp_ms))
    dataio.save_paired(filtered, args.out)
    dataio.write_manifest(str(args.out) + ".manifest.json", "filter",
                          _manifest_args(args), inputs=[args.in_path],
                          outputs=[args.out])
    print(f"filtered {len(samples)} frames at |v| > {args.v_thresh} m/s "
          f"({emptied} now empty) -> {args.out}")
    return 0


def cmd_compare_losses(args) -> int:
    samples = dataio.load_paired(args.data)
    anchors = dataio.load_anchors(args.anchors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for loss in ("ckd", "mse"):
        bundle, _ = _train_once(samples, anchors, args, loss, args.seed,
                                str(out / f"{loss}.metrics.jsonl"), args.v_thresh)
        dataio.save_checkpoint(out / f"{loss}.ckpt", bundle)
        _, test = dataio.SplitSpec(dataio.parse_ratio(args.split_ratio)).split(samples)
        result = classify.evaluate(test, bundle, anchors, mode="zero")
        embedded = classify.embed_labeled(test, bundle)
        report = distill.correlation_report(embedded.teacher, embedded.embeddings)
        results[loss] = {
            "zero_shot_accuracy": result.accuracy,
            "mean_abs_corr_diff": report.mean_abs_diff,
            "n_queries": result.n_queries,
        }
    comparison = {
        "ckd": results["ckd"],
        "mse_kd": results["mse"],
        "accuracy_gap_ckd_minus_mse": (results["ckd"]["zero_shot_accuracy"]
                                       - results["mse"]["zero_shot_accuracy"]),
        "corr_diff_gap_mse_minus_ckd": (results["mse"]["mean_abs_corr_diff"]
                                        - results["ckd"]["mean_abs_corr_diff"]),
    }
    dataio.atomic_write_text(out / "comparison.json",
                             json.dumps(comparison, indent=2, sort_keys=True) + "\n")
    dataio.write_manifest(out / "manifest.json", "compare-losses",
                          _manifest_args(args),
                          inputs=[args.data, args.anchors],
                          outputs=[out / "comparison.json"])
    print(f"ckd: acc {results['ckd']['zero_shot_accuracy']:.4f} "
          f"|dR| {results['ckd']['mean_abs_corr_diff']:.4f} | "
          f"mse: acc {results['mse']['zero_shot_accuracy']:.4f} "
          f"|dR| {results['mse']['mean_abs_corr_diff']:.4f} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfdistill",
        description="Contrastive distillation of radar point-cloud encoders "
                    "and zero/few-shot activity classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic paired dataset")
    p.add_argument("--classes", type=_positive(int, "--classes"), default=5)
    p.add_argument("--per-class", type=_positive(int, "--per-class"), default=400)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=_non_negative(float, "--sigma"), default=0.05)
    p.add_argument("--static-points", type=_non_negative(int, "--static-points"),
                   default=40)
    p.add_argument("--distractors", type=_non_negative(int, "--distractors"),
                   default=1)
    p.add_argument("--distractor-points",
                   type=_non_negative(int, "--distractor-points"), default=12)
    p.add_argument("--subject-points", type=_positive(int, "--subject-points"),
                   default=60)
    p.add_argument("--dim", type=_positive(int, "--dim"), default=512)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train the encoder by distillation")
    p.add_argument("--data", required=True)
    p.add_argument("--anchors", default=None,
                   help="anchor JSONL; enables per-epoch zero-shot validation")
    p.add_argument("--tau", type=_positive(float, "--tau"), default=10.0)
    p.add_argument("--lr", type=_positive(float, "--lr"), default=0.001)
    p.add_argument("--epochs", type=_non_negative(int, "--epochs"), default=30)
    p.add_argument("--batch", type=_positive(int, "--batch"), default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--v-thresh", type=_non_negative(float, "--v-thresh"),
                   default=0.0)
    p.add_argument("--loss", choices=("ckd", "mse"), default="ckd")
    p.add_argument("--direction", choices=("one-way", "symmetric"),
                   default="one-way")
    p.add_argument("--split-ratio", default="9:1",
                   help="contiguous fit:heldout ratio (default 9:1)")
    p.add_argument("--p-fixed", type=_positive(int, "--p-fixed"), default=128)
    p.add_argument("--embed-dim", type=_positive(int, "--embed-dim"), default=512)
    p.add_argument("--dropout", type=_non_negative(float, "--dropout"), default=0.3)
    p.add_argument("--metrics", default=None,
                   help="metrics JSONL path (default: <ckpt>.metrics.jsonl); "
                        "replaced at the start of each run")
    p.add_argument("--checkpoint-every", type=_non_negative(int, "--checkpoint-every"),
                   default=0)
    p.set_defaults(func=cmd_train)

    def eval_common(p):
        p.add_argument("--data", required=True)
        p.add_argument("--anchors", required=True)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--split-ratio", default="9:1")
        p.add_argument("--v-thresh", type=_non_negative(float, "--v-thresh"),
                       default=None, help="override the checkpoint's threshold")

    p = sub.add_parser("eval-zero-shot", help="zero-shot evaluation")
    eval_common(p)
    p.add_argument("--split", choices=("test", "val", "all"), default="test")
    p.set_defaults(func=cmd_eval_zero_shot)

    p = sub.add_parser("eval-few-shot",
                       help="K-shot evaluation (supports from the fit block, "
                            "queries from the held-out block)")
    eval_common(p)
    p.add_argument("--shots", type=_positive(int, "--shots"), required=True)
    p.add_argument("--gamma", type=_non_negative(float, "--gamma"), default=5.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_few_shot)

    p = sub.add_parser("diag-correlation",
                       help="teacher/student correlation-structure report")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--split", choices=("test", "val", "all"), default="all")
    p.add_argument("--split-ratio", default="9:1")
    p.add_argument("--heatmap", default=None, help="optional |dR| PNG path")
    p.set_defaults(func=cmd_diag_correlation)

    p = sub.add_parser("filter", help="Doppler-filter a paired dataset file")
    p.add_argument("--v-thresh", type=_non_negative(float, "--v-thresh"),
                   default=0.0)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embed-dim", type=_positive(int, "--embed-dim"), default=512)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("compare-losses",
                       help="train CKD vs MSE-KD with one seed; report "
                            "accuracy and correlation-gap side by side")
    p.add_argument("--data", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--tau", type=_positive(float, "--tau"), default=10.0)
    p.add_argument("--lr", type=_positive(float, "--lr"), default=0.001)
    p.add_argument("--epochs", type=_non_negative(int, "--epochs"), default=15)
    p.add_argument("--batch", type=_positive(int, "--batch"), default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--v-thresh", type=_non_negative(float, "--v-thresh"),
                   default=0.0)
    p.add_argument("--direction", choices=("one-way", "symmetric"),
                   default="one-way")
    p.add_argument("--split-ratio", default="9:1")
    p.add_argument("--p-fixed", type=_positive(int, "--p-fixed"), default=128)
    p.add_argument("--embed-dim", type=_positive(int, "--embed-dim"), default=512)
    p.add_argument("--dropout", type=_non_negative(float, "--dropout"), default=0.3)
    p.set_defaults(func=cmd_compare_losses)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (RFDistillError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
