"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from pathlib import Path

from . import __version__
from .errors import DataError, NumericalError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def version_string() -> str:
    base = f"serkit {__version__}"
    try:
        describe = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if describe.returncode == 0:
            return f"{base} ({describe.stdout.strip()})"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


def _write_run_info(out_dir: Path, seed: int | None, extra: dict | None = None) -> None:
    info = {"version": version_string(), "seed": seed}
    info.update(extra or {})
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def _parse_snrs(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip() != "")
    except ValueError as exc:
        raise _UsageError(f"bad --snrs list '{text}'") from exc


def _load_config(args) -> "TrainConfig":
    from .trainer import TrainConfig

    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    if getattr(args, "model", None):
        overrides["model_kind"] = args.model
    if getattr(args, "enhancer", None):
        overrides["enhancer"] = args.enhancer
    if getattr(args, "snrs", None):
        overrides["snrs"] = _parse_snrs(args.snrs)
    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    return config


def _fold(manifest, index: int):
    from .evalkit import loso_splits

    folds = loso_splits(manifest)
    if not 0 <= index < len(folds):
        raise DataError(f"fold index {index} out of range (0..{len(folds) - 1})")
    return folds[index]


def build_parser() -> _Parser:
    parser = _Parser(prog="serkit", description=__doc__)
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth-corpus", help="generate the synthetic corpus + manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--utterances-per-speaker-per-class", type=int, default=5)
    p.add_argument("--noises-per-kind", type=int, default=10)

    p = sub.add_parser("featurize", help="write per-utterance feature cache files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain-clean", help="train the clean reference model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--config")

    p = sub.add_parser("train", help="train one model kind")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--model")
    p.add_argument("--enhancer")
    p.add_argument("--snrs")

    p = sub.add_parser("evaluate", help="evaluate checkpoints over conditions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--model")
    p.add_argument("--enhancer")
    p.add_argument("--snrs")

    p = sub.add_parser("ablate", help="run the model-kind comparison matrix")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--enhancer", default="oracle_wiener")
    p.add_argument("--config")
    p.add_argument("--fresh", action="store_true", help="ignore completed runs")

    p = sub.add_parser("dump-embeddings", help="export calibrated representations to CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--model")
    p.add_argument("--enhancer")
    p.add_argument("--snrs", default="0,10,20")
    p.add_argument("--noise-set", default="matched")

    sub.add_parser("selfcheck", help="run gradient and DSP property suites")
    return parser


def run(argv: list[str]) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        return _dispatch(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def _dispatch(args) -> int:
    if args.verb == "synth-corpus":
        from .corpus import CorpusConfig, build_corpus

        config = CorpusConfig(
            utterances_per_speaker_per_class=args.utterances_per_speaker_per_class,
            noises_per_kind=args.noises_per_kind,
            seed=args.seed,
        )
        manifest = build_corpus(args.out, config)
        print(f"wrote {len(manifest.utterances)} utterances, {len(manifest.noises)} noises")
        print(Path(args.out) / "manifest.json")
        return 0

    if args.verb == "featurize":
        from .corpus import load_manifest, read_wav
        from .dsp import lmfb, write_feature_cache

        manifest = load_manifest(args.manifest)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for rec in manifest.utterances:
            feats = lmfb(read_wav(manifest.utterance_path(rec)))
            write_feature_cache(out / f"{rec.id}.lmfb", feats)
        print(f"wrote {len(manifest.utterances)} feature caches to {out}")
        return 0

    if args.verb == "pretrain-clean":
        from .corpus import load_manifest
        from .trainer import pretrain_clean

        manifest = load_manifest(args.manifest)
        fold = _fold(manifest, args.fold)
        _write_run_info(Path(args.out), args.seed, {"fold": args.fold})
        result = pretrain_clean(manifest, args.seed, args.out, fold=fold)
        print(f"best val UAR {result.best_val_uar:.4f} at epoch {result.best_epoch}")
        print(result.checkpoint_path)
        return 0

    if args.verb == "train":
        from .corpus import load_manifest
        from .trainer import train

        manifest = load_manifest(args.manifest)
        config = _load_config(args)
        fold = _fold(manifest, args.fold)
        _write_run_info(Path(args.out), args.seed, {"fold": args.fold})
        result = train(config, manifest, fold, args.seed, args.out)
        print(f"best val UAR {result.best_val_uar:.4f} at epoch {result.best_epoch}")
        print(result.checkpoint_path)
        return 0

    if args.verb == "evaluate":
        from .corpus import load_manifest
        from .evalkit import evaluate, save_report

        manifest = load_manifest(args.manifest)
        config = _load_config(args)
        fold = _fold(manifest, args.fold)
        report = evaluate(args.checkpoint, manifest, config, fold)
        save_report(args.out, report)
        for name, row in report["summary"].items():
            extra = f" mean_c={row['mean_c']:.3f}" if "mean_c" in row else ""
            print(f"{name:<18} UAR={row['uar']:.4f} WAR={row['war']:.4f}{extra}")
        return 0

    if args.verb == "ablate":
        from .corpus import load_manifest
        from .evalkit import ablate_matrix, format_comparison

        manifest = load_manifest(args.manifest)
        try:
            seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip() != "")
        except ValueError as exc:
            raise _UsageError(f"bad --seeds list '{args.seeds}'") from exc
        fold = _fold(manifest, args.fold)
        base = None
        if args.config:
            from .trainer import TrainConfig

            base = TrainConfig.from_file(args.config)
        _write_run_info(Path(args.out), None, {"seeds": list(seeds), "fold": args.fold})
        table = ablate_matrix(
            manifest,
            args.out,
            seeds=seeds,
            fold=fold,
            enhancer=args.enhancer,
            base_config=base,
            reuse=not args.fresh,
        )
        print(format_comparison(table))
        return 0

    if args.verb == "dump-embeddings":
        from .corpus import load_manifest
        from .evalkit import Condition, dump_embeddings

        manifest = load_manifest(args.manifest)
        config = _load_config(args)
        fold = _fold(manifest, args.fold)
        snrs = _parse_snrs(args.snrs)
        conditions = [Condition(f"{args.noise_set}@{s:g}dB", args.noise_set, s) for s in snrs]
        utterances = [u for u in manifest.utterances if u.speaker == fold.test_speaker]
        path = dump_embeddings(
            args.checkpoint, manifest, config, utterances, conditions, args.out
        )
        print(path)
        return 0

    if args.verb == "selfcheck":
        from .checks import run_selfcheck

        if run_selfcheck():
            print("selfcheck: all checks passed")
            return 0
        raise NumericalError("selfcheck failed (see lines above)")

    raise _UsageError(f"unknown verb {args.verb}")


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
