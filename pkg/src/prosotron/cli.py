"""Command line surface: corpus generation, training, and the evaluation
protocols. Exit codes: 0 success, 2 contract violation, 3 numeric failure."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import corpus, experiments, trainer
from .config import TrainConfig, config_from_text
from .errors import ContractError, NumericError

EXIT_OK = 0
EXIT_CONTRACT = 2
EXIT_NUMERIC = 3


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file; flags override it")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None, metavar="V",
                            help=f"TrainConfig.{f.name}")


def _config_from_flags(args) -> TrainConfig:
    pairs = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ContractError(f"config file not found: {path}")
        for line in path.read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                pairs[key.strip()] = value.strip()
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f.name)
        if value is not None:
            pairs[f.name] = value
    text = "".join(f"{k}={v}\n" for k, v in pairs.items())
    return config_from_text(text)


def _parse_ids(text: str | None) -> list | None:
    if not text:
        return None
    return [t.strip() for t in text.split(",") if t.strip()]


def cmd_make_corpus(args) -> int:
    if args.kind == "melody":
        manifest = experiments.make_melodies(
            args.out, n_melodies=args.utterances, seed=args.seed, n_frames=args.frames
        )
    else:
        manifest = corpus.make_corpus(
            args.out, n_utterances=args.utterances, n_speakers=args.speakers,
            seed=args.seed, min_frames=args.min_frames, max_frames=args.max_frames,
        )
    print(f"manifest={manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_flags(args)
    result = trainer.train(cfg, args.manifest, args.out, log_every=args.log_every)
    print(f"checkpoint={result.checkpoint_path}")
    print(f"metrics={result.metrics_path}")
    print(f"final_loss={result.final_loss:.6f}")
    return EXIT_OK


def _finish(report: experiments.ExperimentReport, out_dir) -> int:
    path = report.save(out_dir)
    for note in report.notes:
        print(f"note: {note}", file=sys.stderr)
    print(f"report={path}")
    print(f"aggregate={report.aggregate:.6f}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    report = experiments.reconstruct(
        args.checkpoint, args.manifest, limit=args.limit,
        utterance_ids=_parse_ids(args.ids), out_dir=args.out,
    )
    return _finish(report, args.out)


def cmd_transfer(args) -> int:
    report = experiments.transfer(
        args.checkpoint, args.manifest, args.source_speaker, args.target_speaker,
        limit=args.limit, out_dir=args.out,
    )
    return _finish(report, args.out)


def cmd_control(args) -> int:
    report = experiments.control(
        args.checkpoint, args.manifest, args.utterance, args.edit, args.out
    )
    return _finish(report, args.out)


def cmd_plot_attention(args) -> int:
    include = {"auto": None, "yes": True, "no": False}[args.reference_map]
    report = experiments.plot_attention(
        args.checkpoint, args.manifest, args.utterance, args.out,
        include_reference=include,
    )
    return _finish(report, args.out)


def cmd_contour_transfer(args) -> int:
    lyrics = [int(t) for t in args.lyrics.split()]
    report = experiments.contour_transfer(
        args.checkpoint, args.melody_manifest, args.melody, lyrics,
        args.speaker, out_dir=args.out,
    )
    return _finish(report, args.out)


def cmd_eval_mcd(args) -> int:
    value = experiments.eval_mcd(args.reference, args.generated)
    print(f"mcd={value:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prosotron",
        description="End-to-end speech synthesis with temporal prosody control.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="generate synthetic speech or melodies")
    p.add_argument("--out", required=True)
    p.add_argument("--utterances", type=int, default=200)
    p.add_argument("--speakers", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-frames", type=int, default=160)
    p.add_argument("--max-frames", type=int, default=320)
    p.add_argument("--kind", choices=("speech", "melody"), default="speech")
    p.add_argument("--frames", type=int, default=192, help="melody length in frames")
    p.set_defaults(fn=cmd_make_corpus)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=25)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("reconstruct", help="resynthesize utterances; report MCD")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=10)
    p.add_argument("--ids", help="comma-separated utterance ids")
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("transfer", help="cross-speaker prosody transfer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source-speaker", type=int, required=True)
    p.add_argument("--target-speaker", type=int, required=True)
    p.add_argument("--limit", type=int, default=10)
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("control", help="synthesize with an edited embedding")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--utterance", required=True)
    p.add_argument("--edit", default="", help="e.g. '0:add:0.3' or '1:set:0.5:10-20'")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_control)

    p = sub.add_parser("plot-attention", help="emit alignment maps and similarity")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--utterance", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference-map", choices=("auto", "yes", "no"), default="auto")
    p.set_defaults(fn=cmd_plot_attention)

    p = sub.add_parser("contour-transfer", help="sing lyrics to a melody's contour")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--melody-manifest", required=True)
    p.add_argument("--melody", required=True, help="melody utterance id")
    p.add_argument("--lyrics", required=True, help="space-separated phoneme ids")
    p.add_argument("--speaker", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_contour_transfer)

    p = sub.add_parser("eval-mcd", help="MCD between two wav files")
    p.add_argument("reference")
    p.add_argument("generated")
    p.set_defaults(fn=cmd_eval_mcd)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ContractError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONTRACT
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
