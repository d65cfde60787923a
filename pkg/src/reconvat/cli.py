"""Command-line entry point: prepare, train, transcribe, evaluate, continual."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import audio
from .datasets import (AUDIO_SUFFIXES, Clip, CorpusError, SyntheticSpec, generate_synthetic_corpus, load_clips,
                       read_exclusion_list, read_manifest, scan_corpus, write_manifest)
from .labels import FRAME_RATE, notes_to_rolls, read_label_tsv, write_label_tsv
from .metrics import clip_scores, corpus_report, format_report, METRIC_FAMILIES
from .training import (CheckpointError, ConfigError, NonFiniteLossError, Trainer, TrainingConfig, continual_train,
                       dump_config, load_config, load_transcriber, read_checkpoint, split_train_validation,
                       transcribe_clip)

log = logging.getLogger("reconvat")

DATA_ROOT_ENV = "RECONVAT_DATA_ROOT"
EXIT_USAGE = 2
EXIT_FAILURE = 1
EXIT_NONFINITE = 3


class CommandError(RuntimeError):
    pass


# -- prepare ----------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    out = Path(args.out)
    if args.synthetic:
        spec = SyntheticSpec(n_clips=args.clips, seed=args.seed, duration=args.duration,
                             pitch_range=(args.pitch_min, args.pitch_max), polyphony=args.polyphony,
                             notes_per_clip=(args.min_notes, args.max_notes))
        n_lab = args.clips if args.labelled is None else args.labelled
        manifest = generate_synthetic_corpus(spec, out, labelled=[i < n_lab for i in range(args.clips)])
        print(f"wrote {args.clips} clips and {out / 'clip_manifest.tsv'}")
        return 0
    root = args.scan or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise CommandError(f"give --synthetic or --scan ROOT (or set {DATA_ROOT_ENV})")
    manifest = scan_corpus(root, args.layout, args.split, read_exclusion_list(args.exclude))
    target = out if out.suffix == ".tsv" else out / "manifest.tsv"
    target.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(target, manifest)
    n_lab, n_unl = manifest.sizes
    print(f"{target}: {n_lab} labelled, {n_unl} unlabelled")
    return 0


# -- train ------------------------------------------------------------------------------

def resolve_config(args) -> TrainingConfig:
    """Defaults (full or toy scale) <- config file <- command-line flags."""
    if getattr(args, "toy", False):
        from .experiments import TOY_CONFIG
        config = TOY_CONFIG
    else:
        config = TrainingConfig()
    if args.config:
        config = load_config(args.config, config)
    overrides = {}
    for flag, key in (("vat", "use_vat"), ("recon", "use_reconstruction"), ("onset", "use_onset"),
                      ("epochs", "epochs"), ("seed", "seed"), ("epsilon", "epsilon"), ("alpha", "alpha"),
                      ("n_labelled", "n_labelled"), ("n_unlabelled", "n_unlabelled"),
                      ("checkpoint_every", "checkpoint_every")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return config.replace(**overrides)


def cmd_train(args) -> int:
    config = resolve_config(args)
    manifest = read_manifest(args.manifest)
    labelled, unlabelled = load_clips(manifest, include_unlabelled=config.use_vat)
    validation = []
    if args.train_fraction is not None:
        labelled, validation = split_train_validation(labelled, args.train_fraction, config.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(config))
    trainer = Trainer(config, labelled, unlabelled, validation)
    trainer.metadata["manifest"] = str(Path(args.manifest).resolve())
    log_path = out / "metrics.tsv"
    if log_path.exists():
        log_path.unlink()
    iterations = args.iterations if args.iterations is not None else config.epochs * config.iterations_per_epoch
    try:
        trainer.fit(iterations, log_path=log_path, checkpoint_dir=out)
    except NonFiniteLossError as err:
        (out / "diagnostic.json").write_text(json.dumps(err.snapshot, indent=2, default=str))
        print(f"training aborted: {err}", file=sys.stderr)
        return EXIT_NONFINITE
    trainer.save(out / "checkpoint.pt")
    print(f"trained {trainer.iteration} iterations; checkpoint at {out / 'checkpoint.pt'}")
    return 0


# -- transcribe -------------------------------------------------------------------------

def render_roll(frame_roll: np.ndarray, onset_roll: np.ndarray | None, path: str | Path, scale: int = 1) -> None:
    """Save a piano roll as an RGB raster: one pixel row per pitch (highest at the top) times ``scale``."""
    from PIL import Image

    T = frame_roll.shape[0]
    img = np.full((frame_roll.shape[1], T, 3), 255, dtype=np.uint8)
    img[frame_roll.T.astype(bool)] = (40, 90, 200)
    if onset_roll is not None:
        img[onset_roll.T.astype(bool)] = (210, 40, 40)
    img = img[::-1]
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    Image.fromarray(img).save(str(path))


def cmd_transcribe(args) -> int:
    transcriber, config = load_transcriber(args.checkpoint)
    clip = audio.load_wav(args.audio)
    result = transcribe_clip(transcriber, clip, config.segment_samples, config.threshold, config.use_onset)
    out = Path(args.out) if args.out else Path(args.audio).with_suffix(".notes.tsv")
    write_label_tsv(out, result.notes)
    print(f"{len(result.notes)} notes -> {out}")
    if args.plot:
        render_roll(result.frame_roll, result.onset_roll, args.plot, args.scale)
        print(f"piano roll -> {args.plot}")
    return 0


# -- evaluate ---------------------------------------------------------------------------

def _expand(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        files.extend(sorted(p.glob("*.tsv")) if p.is_dir() else [p])
    return files


def evaluate_files(pred_files, ref_files) -> list[tuple[str, dict]]:
    if len(pred_files) != len(ref_files):
        raise CommandError(f"{len(pred_files)} prediction files but {len(ref_files)} reference files")
    results = []
    for pf, rf in zip(pred_files, ref_files):
        pred, ref = read_label_tsv(pf), read_label_tsv(rf)
        end = max([n.offset for n in pred + ref], default=0.0)
        n_frames = int(np.ceil(end * FRAME_RATE)) + 1
        pred_roll = notes_to_rolls(pred, n_frames).frame
        ref_roll = notes_to_rolls(ref, n_frames).frame
        results.append((Path(rf).stem, clip_scores(pred, ref, pred_roll, ref_roll)))
    return results


def format_clip_rows(results) -> str:
    lines = ["clip\tmetric\tP\tR\tF1"]
    for name, scores in results:
        for family in METRIC_FAMILIES:
            s = scores[family]
            lines.append(f"{name}\t{family}\t{100 * s.precision:.1f}\t{100 * s.recall:.1f}\t{100 * s.f1:.1f}")
    return "\n".join(lines)


def cmd_evaluate(args) -> int:
    results = evaluate_files(_expand(args.pred), _expand(args.ref))
    text = format_clip_rows(results) + "\n\n" + format_report(corpus_report(s for _, s in results)) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


# -- continual --------------------------------------------------------------------------

def cmd_continual(args) -> int:
    state = read_checkpoint(args.checkpoint)
    manifest_path = args.manifest or state.get("metadata", {}).get("manifest")
    if not manifest_path:
        raise CommandError("checkpoint does not record its manifest; pass --manifest")
    manifest = read_manifest(manifest_path)
    labelled, unlabelled = load_clips(manifest)
    known = {p.resolve() for p in manifest.audio_paths()}
    new_paths = sorted(p for p in Path(args.unlabelled).rglob("*") if p.suffix.lower() in AUDIO_SUFFIXES)
    added = [p for p in new_paths if p.resolve() not in known]
    if not added:
        raise CommandError(f"no new audio under {args.unlabelled}")
    print(f"unlabelled pool: {len(unlabelled)} -> {len(unlabelled) + len(added)} clips")
    for p in added:
        print(f"+ {p}")
    new = [Clip(audio.load_wav(p), None, p, "test") for p in added]
    trainer = continual_train(args.checkpoint, labelled, unlabelled, new, args.epochs,
                              log_path=Path(args.out).with_suffix(".metrics.tsv") if args.epochs else None)
    trainer.metadata.setdefault("added_unlabelled", []).extend(str(p) for p in added)
    trainer.metadata["manifest"] = str(Path(manifest_path).resolve())
    if args.epochs == 0:
        trainer.metadata = dict(state.get("metadata", {}))
    trainer.save(args.out)
    print(f"checkpoint -> {args.out}")
    return 0


# -- parser -----------------------------------------------------------------------------

def _add_toggle(parser, name, help_text):
    group = parser.add_mutually_exclusive_group()
    group.add_argument(f"--{name}", dest=name, action="store_true", default=None, help=help_text)
    group.add_argument(f"--no-{name}", dest=name, action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reconvat", description="Semi-supervised music transcription")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="synthesise a corpus or scan a directory into a manifest")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--clips", type=int, default=10)
    p.add_argument("--labelled", type=int, default=None, help="how many synthetic clips are listed as labelled")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=4.0)
    p.add_argument("--pitch-min", type=int, default=60)
    p.add_argument("--pitch-max", type=int, default=72)
    p.add_argument("--polyphony", type=int, default=2)
    p.add_argument("--min-notes", type=int, default=4)
    p.add_argument("--max-notes", type=int, default=8)
    p.add_argument("--scan", default=None, help=f"corpus root (default ${DATA_ROOT_ENV})")
    p.add_argument("--layout", choices=["maps_like", "musicnet_like"], default="maps_like")
    p.add_argument("--split", choices=["train", "validation", "test"], default="train")
    p.add_argument("--exclude", default=None, help="file listing names to leave out, one per line")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a transcriber")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--toy", action="store_true", help="start from the desk-scale configuration")
    _add_toggle(p, "vat", "virtual adversarial training")
    _add_toggle(p, "recon", "spectrogram reconstruction branch")
    _add_toggle(p, "onset", "two-channel output with onset head")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None, help="overrides --epochs")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--n-labelled", type=int, default=None)
    p.add_argument("--n-unlabelled", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None, help="epochs between checkpoints")
    p.add_argument("--train-fraction", type=float, default=None,
                   help="hold out the rest of the labelled clips for validation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transcribe", help="transcribe an audio file to a note tsv")
    p.add_argument("audio")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--plot", default=None, help="write a piano-roll image here")
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("evaluate", help="score predicted note tsvs against references")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--ref", nargs="+", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("continual", help="resume a checkpoint with new unlabelled audio")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--unlabelled", required=True, help="directory of new audio")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--manifest", default=None, help="manifest of the original run (default: recorded in checkpoint)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_continual)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, CorpusError, CheckpointError, FileNotFoundError, ValueError) as err:
        print(f"reconvat {args.command}: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
