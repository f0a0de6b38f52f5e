"""Metrics, leave-one-speaker-out splits, condition sweeps, and exports.

Evaluation runs the inference path only (noisy input through enhancement,
coefficient estimation, blending, encoding, calibration, classification)
over a set of conditions: clean, and each noise set crossed with each SNR.
Reports carry per-condition UAR/WAR/mean-coefficient plus seed-averaged
summaries and are written as stable JSON.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import EMOTIONS, Manifest, UtteranceRecord
from .errors import DataError
from .seeding import generator

N_CLASSES = len(EMOTIONS)


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = reference class, columns = predicted class."""
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.shape != preds.shape:
        raise DataError("labels and predictions differ in length")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError("label outside class range")
    if preds.size and (preds.min() < 0 or preds.max() >= n_classes):
        raise DataError("prediction outside class range")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def uar(cm: np.ndarray) -> float:
    """Unweighted average recall: mean of per-class recalls."""
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    if (support == 0).any():
        missing = [EMOTIONS[i] for i in np.flatnonzero(support == 0)]
        raise DataError(f"UAR undefined: zero support for class(es) {missing}")
    return float(np.mean(np.diag(cm) / support))


def war(cm: np.ndarray) -> float:
    """Weighted average recall (overall accuracy)."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise DataError("WAR undefined on an empty confusion matrix")
    return float(np.trace(cm) / total)


# ---------------------------------------------------------------------------
# cross-validation folds


@dataclass(frozen=True)
class Fold:
    train_sessions: tuple[str, ...]
    val_speaker: str
    test_speaker: str


def loso_splits(manifest: Manifest) -> list[Fold]:
    """Leave-one-speaker-out folds: for each held-out session, its two
    speakers alternate between validation and test roles."""
    sessions = manifest.sessions()
    if len(sessions) < 2:
        raise DataError("leave-one-speaker-out requires at least 2 sessions")
    by_session: dict[str, list[str]] = {}
    for u in manifest.utterances:
        speakers = by_session.setdefault(u.session, [])
        if u.speaker not in speakers:
            speakers.append(u.speaker)
    folds: list[Fold] = []
    for held_out in sessions:
        speakers = sorted(by_session[held_out])
        if len(speakers) != 2:
            raise DataError(
                f"session '{held_out}' has {len(speakers)} speakers; held-out sessions need exactly 2"
            )
        train = tuple(s for s in sessions if s != held_out)
        a, b = speakers
        folds.append(Fold(train, val_speaker=a, test_speaker=b))
        folds.append(Fold(train, val_speaker=b, test_speaker=a))
    return folds


# ---------------------------------------------------------------------------
# condition construction


@dataclass(frozen=True)
class Condition:
    name: str
    noise_set: str | None = None  # None -> clean
    snr_db: float | None = None


def standard_conditions(snrs=(0.0, 5.0, 10.0, 15.0, 20.0), noise_sets=("matched", "unmatched")) -> list[Condition]:
    conditions = [Condition("clean")]
    for noise_set in noise_sets:
        for snr in snrs:
            conditions.append(Condition(f"{noise_set}@{snr:g}dB", noise_set, float(snr)))
    return conditions


def build_condition_views(
    manifest: Manifest,
    utterances: list[UtteranceRecord],
    condition: Condition,
    enhancer_name: str,
    eval_seed: int = 0,
    max_frames: int = 500,
    with_target: bool = False,
):
    """Inference views for one condition; noise pairing depends only on
    (eval_seed, utterance, condition) so every model sees the same audio."""
    from .corpus import read_wav
    from .enhance import make_enhancer
    from .trainer import EMOTION_TO_LABEL, make_view

    enhancer = make_enhancer(enhancer_name) if enhancer_name != "none" else None
    views = []
    noises = manifest.noises_in_set(condition.noise_set) if condition.noise_set else []
    if condition.noise_set and not noises:
        raise DataError(f"manifest has no noises in set '{condition.noise_set}'")
    for rec in utterances:
        wave = read_wav(manifest.utterance_path(rec))
        noise_wave = None
        rng = None
        if condition.noise_set:
            rng = generator("eval-pairing", eval_seed, rec.id, condition.name)
            noise = noises[int(rng.integers(len(noises)))]
            noise_wave = read_wav(manifest.noise_path(noise))
        views.append(
            make_view(
                wave,
                EMOTION_TO_LABEL[rec.emotion],
                rec.id,
                enhancer,
                noise_wave=noise_wave,
                snr_db=condition.snr_db,
                rng=rng,
                with_target=with_target,
                max_frames=max_frames,
                noise_set=condition.noise_set,
            )
        )
    return views


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    checkpoint_paths,
    manifest: Manifest,
    config,
    fold: Fold,
    conditions: list[Condition] | None = None,
    eval_seed: int = 0,
    speakers: list[str] | None = None,
) -> dict:
    """Evaluate one or more checkpoints of the same kind over conditions.

    Returns a report dict: per-checkpoint per-condition metrics plus a
    mean across checkpoints (seed average).
    """
    from .trainer import EmotionModel, run_inference

    if isinstance(checkpoint_paths, (str, Path)):
        checkpoint_paths = [checkpoint_paths]
    conditions = conditions or standard_conditions(config.snrs)
    target_speakers = speakers or [fold.test_speaker]
    utterances = [u for u in manifest.utterances if u.speaker in target_speakers]
    if not utterances:
        raise DataError(f"no utterances for speakers {target_speakers}")

    enhancer_name = config.enhancer if config.needs_enhancer() else "none"
    per_checkpoint = []
    for path in checkpoint_paths:
        model = EmotionModel.from_checkpoint(config, path, frozen=None)
        entry = {"checkpoint": str(path), "conditions": {}}
        for condition in conditions:
            views = build_condition_views(
                manifest, utterances, condition, enhancer_name, eval_seed, config.max_frames
            )
            out = run_inference(model, views, batch=config.batch)
            cm = confusion_matrix(out["label"], out["pred"])
            stats = {
                "uar": uar(cm),
                "war": war(cm),
                "confusion": cm.tolist(),
                "n": len(views),
            }
            if out["coeff"] is not None:
                stats["mean_c"] = float(np.mean(out["coeff"]))
            entry["conditions"][condition.name] = stats
        per_checkpoint.append(entry)

    summary: dict[str, dict[str, float]] = {}
    for condition in conditions:
        rows = [e["conditions"][condition.name] for e in per_checkpoint]
        summary[condition.name] = {
            "uar": float(np.mean([r["uar"] for r in rows])),
            "war": float(np.mean([r["war"] for r in rows])),
        }
        if all("mean_c" in r for r in rows):
            summary[condition.name]["mean_c"] = float(np.mean([r["mean_c"] for r in rows]))

    return {
        "model_kind": config.model_kind,
        "enhancer": enhancer_name,
        "fold": {
            "train_sessions": list(fold.train_sessions),
            "val_speaker": fold.val_speaker,
            "test_speaker": fold.test_speaker,
        },
        "eval_seed": eval_seed,
        "checkpoints": per_checkpoint,
        "summary": summary,
    }


def save_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", "utf-8")


def load_report(path) -> dict:
    return json.loads(Path(path).read_text("utf-8"))


# ---------------------------------------------------------------------------
# embedding export


def dump_embeddings(
    checkpoint_path,
    manifest: Manifest,
    config,
    utterances: list[UtteranceRecord],
    conditions: list[Condition],
    out_csv,
    eval_seed: int = 0,
) -> Path:
    """One CSV row per (utterance, condition): id, emotion, condition,
    snr_db, then the 256 calibrated-representation values."""
    from . import autograd as ag
    from .trainer import EmotionModel

    model = EmotionModel.from_checkpoint(config, checkpoint_path, frozen=None)
    enhancer_name = config.enhancer if config.needs_enhancer() else "none"
    out_path = Path(out_csv)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id", "emotion", "condition", "snr_db"] + [f"e{i:03d}" for i in range(256)]
        )
        for condition in conditions:
            views = build_condition_views(
                manifest, utterances, condition, enhancer_name, eval_seed, config.max_frames
            )
            with ag.no_grad():
                for i in range(0, len(views), config.batch):
                    chunk = views[i : i + config.batch]
                    res = model.forward(chunk)
                    reps = (res.calibrated if res.calibrated is not None else res.rep).data
                    for view, rep in zip(chunk, reps):
                        writer.writerow(
                            [
                                view.utt_id,
                                EMOTIONS[view.label],
                                condition.name,
                                "" if condition.snr_db is None else f"{condition.snr_db:g}",
                            ]
                            + [repr(float(x)) for x in rep]
                        )
    return out_path


def centroid_scatter(csv_path) -> float:
    """Mean distance from per-(class, condition) centroids to their class
    mean: low values mean condition-invariant representations."""
    rows = list(csv.reader(open(csv_path)))
    header, data = rows[0], rows[1:]
    start = header.index("e000")
    by_key: dict[tuple[str, str], list[np.ndarray]] = {}
    for row in data:
        vec = np.array([float(x) for x in row[start:]])
        by_key.setdefault((row[1], row[2]), []).append(vec)
    centroids = {k: np.mean(v, axis=0) for k, v in by_key.items()}
    scatter = []
    for emotion in sorted({k[0] for k in centroids}):
        points = np.stack([c for (e, _), c in sorted(centroids.items()) if e == emotion])
        center = points.mean(axis=0)
        scatter.append(float(np.mean(np.linalg.norm(points - center, axis=1))))
    return float(np.mean(scatter))


# ---------------------------------------------------------------------------
# ablation matrix


def ablate_matrix(
    manifest: Manifest,
    out_dir,
    seeds=(0, 1, 2),
    fold: Fold | None = None,
    enhancer: str = "oracle_wiener",
    kinds=None,
    base_config=None,
    eval_seed: int = 0,
    reuse: bool = True,
) -> dict:
    """Train and evaluate the six-kind comparison matrix across seeds.

    The clean-only kind is trained first per seed; its checkpoint doubles
    as the frozen reference for the coupled kinds. Completed run
    directories (checkpoint + report present) are reused when ``reuse``,
    making the matrix resumable. Returns the comparison table dict.
    """
    from .trainer import KINDS, TrainConfig, train

    base_config = base_config or TrainConfig()
    kinds = list(kinds or KINDS)
    fold = fold or loso_splits(manifest)[0]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    ordered = sorted(kinds, key=lambda k: (k != "baseline_c", KINDS.index(k)))
    runs: dict[tuple[str, int], dict] = {}
    for seed in seeds:
        frozen_path = ""
        for kind in ordered:
            run_dir = out / f"{kind}_seed{seed}"
            ckpt = run_dir / "checkpoint.bin"
            report_path = run_dir / "report.json"
            cfg_kwargs = dict(
                model_kind=kind,
                enhancer=enhancer if kind != "baseline_c" else "identity",
                seeds=tuple(seeds),
            )
            if kind in ("trnet", "trnet_no_low", "trnet_no_high"):
                cfg_kwargs["frozen_checkpoint"] = frozen_path
            config = _with_overrides(base_config, **cfg_kwargs)
            if not (reuse and ckpt.exists() and report_path.exists()):
                train(config, manifest, fold, seed, run_dir)
                report = evaluate(ckpt, manifest, config, fold, eval_seed=eval_seed)
                save_report(report_path, report)
            runs[(kind, seed)] = load_report(report_path)
            if kind == "baseline_c":
                frozen_path = str(ckpt)

    table = _comparison_table(runs, kinds, list(seeds), base_config.snrs)
    save_report(out / "comparison.json", table)
    return table


def _with_overrides(config, **kwargs):
    from dataclasses import replace

    return replace(config, **kwargs)


def _comparison_table(runs, kinds, seeds, snrs) -> dict:
    table: dict = {"kinds": {}, "seeds": seeds}
    for kind in kinds:
        reports = [runs[(kind, seed)] for seed in seeds if (kind, seed) in runs]
        if not reports:
            continue
        conditions = reports[0]["summary"].keys()
        per_cond = {}
        for name in conditions:
            per_cond[name] = {
                "uar": float(np.mean([r["summary"][name]["uar"] for r in reports])),
                "war": float(np.mean([r["summary"][name]["war"] for r in reports])),
            }
            if all("mean_c" in r["summary"][name] for r in reports):
                per_cond[name]["mean_c"] = float(
                    np.mean([r["summary"][name]["mean_c"] for r in reports])
                )
        matched = [per_cond[f"matched@{s:g}dB"] for s in snrs if f"matched@{s:g}dB" in per_cond]
        unmatched = [
            per_cond[f"unmatched@{s:g}dB"] for s in snrs if f"unmatched@{s:g}dB" in per_cond
        ]
        table["kinds"][kind] = {
            "conditions": per_cond,
            "clean_uar": per_cond.get("clean", {}).get("uar"),
            "clean_war": per_cond.get("clean", {}).get("war"),
            "matched_uar": float(np.mean([c["uar"] for c in matched])) if matched else None,
            "matched_war": float(np.mean([c["war"] for c in matched])) if matched else None,
            "unmatched_uar": float(np.mean([c["uar"] for c in unmatched])) if unmatched else None,
            "unmatched_war": float(np.mean([c["war"] for c in unmatched])) if unmatched else None,
        }
    return table


def format_comparison(table: dict) -> str:
    lines = [f"{'model':<16} {'clean UAR':>9} {'clean WAR':>9} {'match UAR':>9} "
             f"{'match WAR':>9} {'unmatch UAR':>11} {'unmatch WAR':>11}"]
    for kind, row in table["kinds"].items():
        def fmt(x):
            return "    -" if x is None else f"{100 * x:8.2f}%"

        lines.append(
            f"{kind:<16} {fmt(row['clean_uar'])} {fmt(row['clean_war'])} "
            f"{fmt(row['matched_uar'])} {fmt(row['matched_war'])} "
            f"{fmt(row['unmatched_uar']):>11} {fmt(row['unmatched_war']):>11}"
        )
    return "\n".join(lines)
