"""Command-line entry point for the full pipeline.

Subcommands: featurize, infer, train, synth, eval, bench, inspect.
Exit codes: 0 ok, 1 runtime error (message on stderr), 2 usage error.
With --json, stdout carries exactly one JSON object.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data_synth, eval_bench
from .audio_io import (
    LABEL_MUSIC,
    LABEL_NO_MUSIC,
    TARGET_RATE,
    AudioClip,
    condition,
    read_wav,
)
from .errors import MusicNetError
from .featurize import dump_feature
from .model import MusicNetModel, load_weights_file, save_weights_file
from .train import TrainConfig, fit, load_manifest, prepare_dataset


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="musicnet",
                                 description="Background-music detection pipeline")
    ap.add_argument("--json", action="store_true", help="emit one JSON object on stdout")
    ap.add_argument("--jobs", type=int, default=0, metavar="N",
                    help="cap math-library worker threads (0 = library default)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="compute the 900x120 log-mel feature of a clip")
    p.add_argument("--in", dest="infile", required=True, help="input WAV file")
    p.add_argument("--out", required=True, help="output feature dump (binary)")
    p.add_argument("--dump-plan", action="store_true",
                   help="also write the featurization tensors next to --out")

    p = sub.add_parser("infer", help="score one clip with a trained model")
    p.add_argument("--model", required=True, help="MNW1 weight file")
    p.add_argument("--in", dest="infile", required=True, help="input WAV file")
    p.add_argument("--threshold", type=float, default=None,
                   help="decision threshold; prints MUSIC/NO_MUSIC when given")

    p = sub.add_parser("train", help="train on a JSON-lines manifest of labeled WAVs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True, help="checkpoints and metrics CSV go here")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--train-featurizer", action="store_true",
                   help="also update the two spectrum matrices (frozen by default)")

    p = sub.add_parser("synth", help="synthesize a labeled clip set from a recipe")
    p.add_argument("--recipe", required=True, help="JSON recipe file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="score a manifest and report ROC/AUC/operating point")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--target-fpr", type=float, default=0.001)
    p.add_argument("--report", required=True, help="output report JSON path")
    p.add_argument("--roc-csv", default=None, help="optional ROC points CSV path")

    p = sub.add_parser("bench", help="measure single-clip inference latency")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", default=None,
                   help="clip to benchmark (default: synthetic noise)")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)

    p = sub.add_parser("inspect", help="print topology, parameter counts, size, CRC status")
    p.add_argument("--model", required=True)
    return ap


def _emit(args, obj: dict, text: str) -> None:
    if args.json:
        print(json.dumps(obj))
    else:
        print(text)


def _cmd_featurize(args) -> int:
    clip = condition(read_wav(args.infile))
    model = MusicNetModel()
    feat = model.featurize(clip)
    with open(args.out, "wb") as f:
        dump_feature(feat, f)
    if args.dump_plan:
        plan = model.feature_plan
        base = Path(args.out)
        np.savez(base.with_suffix(".plan.npz"),
                 real_basis=plan.real_basis, imag_basis=plan.imag_basis,
                 mel_weights=plan.mel_weights, window=plan.window)
    _emit(args, {"out": args.out, "shape": list(feat.values.shape)},
          f"wrote {args.out} ({feat.values.shape[0]}x{feat.values.shape[1]})")
    return 0


def _cmd_infer(args) -> int:
    model = load_weights_file(args.model)
    clip = condition(read_wav(args.infile))
    p = model.forward(clip)
    obj = {"probability": p}
    text = f"{p:.6f}"
    if args.threshold is not None:
        decision = "MUSIC" if p >= args.threshold else "NO_MUSIC"
        obj["decision"] = decision
        text += f" {decision}"
    _emit(args, obj, text)
    return 0


def _cmd_train(args) -> int:
    records = load_manifest(args.manifest)
    clips = []
    for rec in records:
        clip = condition(read_wav(rec["path"]))
        clip.label = rec["label"]
        clip.source_id = rec.get("source_id", rec["path"])
        clips.append(clip)
    model = MusicNetModel.init_random(seed=args.seed)
    cfg = TrainConfig(batch_size=args.batch_size, lr=args.lr, max_epochs=args.epochs,
                      seed=args.seed, train_featurizer=args.train_featurizer)
    dataset = prepare_dataset(clips, model.feature_plan,
                              keep_waveforms=args.train_featurizer)
    result = fit(model, dataset, cfg, out_dir=args.out_dir)
    final = Path(args.out_dir) / "final.mnw"
    save_weights_file(model, final)
    last = result.history[-1]
    _emit(args, {"epochs_run": result.epochs_run, "final": str(final), **last},
          f"trained {result.epochs_run} epochs, loss {last['mean_loss']:.4f}, "
          f"acc {last['accuracy']:.3f}, wrote {final}")
    return 0


def _cmd_synth(args) -> int:
    with open(args.recipe) as f:
        recipe = json.load(f)
    kind = recipe.get("type", "grid")
    out_dir = Path(args.out_dir)
    if kind == "grid":
        manifest = data_synth.build_instrument_grid(
            instruments=recipe.get("instruments", list(data_synth.DEFAULT_INSTRUMENTS)),
            per_type_music_only=recipe.get("per_type_music_only", 20),
            per_type_mixed=recipe.get("per_type_mixed", 10),
            smrs=recipe.get("smrs", list(data_synth.DEFAULT_SMRS)),
            seed=args.seed)
        data_synth.add_no_music_entries(
            manifest, clean=recipe.get("no_music_clean", 150),
            noisy=recipe.get("no_music_noisy", 150), seed=args.seed + 1)
        mpath = data_synth.render_manifest(manifest, out_dir)
    elif kind == "train":
        manifest = data_synth.TestManifest()
        idx = 0
        for cat, count in (("music_only", recipe.get("music", 100)),
                           ("clean_only", recipe.get("speech_like", 50)),
                           ("noise_only", recipe.get("noise", 50))):
            label = LABEL_MUSIC if cat == "music_only" else LABEL_NO_MUSIC
            for j in range(count):
                manifest.entries.append(data_synth.ManifestEntry(
                    path=f"{cat}_{j:04d}.wav", label=label, category=cat,
                    seed=data_synth._entry_seed(args.seed, idx)))
                idx += 1
        mpath = data_synth.render_manifest(manifest, out_dir)
    else:
        raise MusicNetError(f"unknown recipe type {kind!r}")
    _emit(args, {"manifest": str(mpath), "entries": len(manifest.entries)},
          f"wrote {len(manifest.entries)} clips, manifest {mpath}")
    return 0


def _cmd_eval(args) -> int:
    model = load_weights_file(args.model)
    report = eval_bench.evaluate_manifest(model, args.manifest, target_fpr=args.target_fpr)
    with open(args.report, "w") as f:
        f.write(report.to_json())
    if args.roc_csv:
        report.write_roc_csv(args.roc_csv)
    _emit(args,
          {"report": args.report, "auc": report.auc, "tpr_at_target": report.tpr_at_target,
           "threshold": report.threshold},
          f"auc {report.auc:.4f}, tpr@{args.target_fpr:g} {report.tpr_at_target:.4f} "
          f"(threshold {report.threshold:.4f}), report {args.report}")
    return 0


def _cmd_bench(args) -> int:
    model = load_weights_file(args.model)
    if args.infile:
        clip = read_wav(args.infile)
    else:
        clip = data_synth.gen_synthetic_stems("noise", seed=0)
    stats = eval_bench.benchmark_latency(model, clip, warmup=args.warmup, runs=args.runs)
    _emit(args, dict(stats.__dict__),
          f"mean {stats.mean_ms:.2f} ms, p50 {stats.p50_ms:.2f} ms, "
          f"p95 {stats.p95_ms:.2f} ms over {stats.runs} runs on {stats.hardware} "
          f"(reference: {stats.reference_ms} ms on {stats.reference_cpu})")
    return 0


def _cmd_inspect(args) -> int:
    size = Path(args.model).stat().st_size
    crc_status = "ok"
    model = None
    try:
        model = load_weights_file(args.model)
    except MusicNetError as exc:
        crc_status = f"FAILED: {exc}"
    obj = {"file": args.model, "size_bytes": size, "crc": crc_status}
    lines = [f"file: {args.model}", f"size: {size} bytes", f"crc: {crc_status}"]
    if model is not None:
        counts = model.count_parameters()
        obj["param_counts"] = counts
        obj["tensors"] = {k: list(v.shape) for k, v in model.params.items()}
        lines.append(f"trainable parameters: {counts['trainable']}")
        lines.append(f"frozen featurization values: {counts['frozen']}")
        for k, v in model.params.items():
            lines.append(f"  {k}: {'x'.join(map(str, v.shape))}")
    _emit(args, obj, "\n".join(lines))
    return 0 if model is not None else 1


_COMMANDS = {
    "featurize": _cmd_featurize,
    "infer": _cmd_infer,
    "train": _cmd_train,
    "synth": _cmd_synth,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs and args.jobs > 0:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.jobs):
            return _dispatch(args)
    return _dispatch(args)


def _dispatch(args) -> int:
    try:
        return _COMMANDS[args.command](args)
    except MusicNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
