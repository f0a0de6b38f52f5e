"""Joint training of the emotion recognizer and its coupling stages.

Six model kinds share one implementation:

* ``baseline_c``     - clean-data-only recognizer (also serves as the
                       pretrained clean-reference twin).
* ``baseline_n``     - trained on clean + matched-noise data, no enhancer.
* ``baseline_e``     - trained on enhancer outputs (clean + matched noise).
* ``trnet``          - enhancer coupling with coefficient-weighted feature
                       blending, representation calibration, and both
                       clean-reference losses.
* ``trnet_no_low``   - trnet with the feature-match loss weight zeroed.
* ``trnet_no_high``  - trnet with the representation-match loss weight
                       zeroed.

The total objective is task cross-entropy plus weighted feature-match and
representation-match terms; per-epoch noise pairing is re-randomized from
the run seed, validation uses a fixed pairing, and the best
validation-UAR epoch is restored at the end (early stop on patience).
Clean-reference features and representations are consumed only on the
training path; inference views never carry them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import bridge, snr_aware
from . import ser
from .autograd import Adam, Tensor, load_checkpoint, save_checkpoint
from .corpus import Manifest, NoiseRecord, UtteranceRecord, Waveform, read_wav
from .dsp import LOG_FLOOR, lmfb, mix_at_snr
from .enhance import Enhancer, make_enhancer
from .errors import DataError
from .evalkit import uar as _uar
from .evalkit import war as _war
from .evalkit import confusion_matrix
from .seeding import generator

KINDS = ("baseline_c", "baseline_n", "baseline_e", "trnet", "trnet_no_low", "trnet_no_high")
TRNET_KINDS = ("trnet", "trnet_no_low", "trnet_no_high")
EMOTION_TO_LABEL = {"angry": 0, "happy": 1, "neutral": 2, "sad": 3}
LABEL_TO_EMOTION = {v: k for k, v in EMOTION_TO_LABEL.items()}
PAD_VALUE = float(np.log(LOG_FLOOR))


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "trnet"
    alpha: float = 0.5
    beta: float = 0.5
    lr: float = 1e-3
    batch: int = 32
    max_epochs: int = 80
    max_frames: int = 500
    seeds: tuple[int, ...] = (0, 1, 2)
    enhancer: str = "oracle_wiener"
    snrs: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    patience: int = 10
    classify_calibrated: bool = True
    frozen_checkpoint: str = ""

    def __post_init__(self):
        if self.model_kind not in KINDS:
            raise DataError(f"unknown model kind '{self.model_kind}'")
        if self.alpha < 0 or self.beta < 0:
            raise DataError("loss weights must be non-negative")

    @property
    def is_coupled(self) -> bool:
        return self.model_kind in TRNET_KINDS

    def effective_weights(self) -> tuple[float, float]:
        alpha = 0.0 if self.model_kind == "trnet_no_low" else self.alpha
        beta = 0.0 if self.model_kind == "trnet_no_high" else self.beta
        return alpha, beta

    def needs_enhancer(self) -> bool:
        return self.model_kind == "baseline_e" or self.is_coupled

    def to_file(self, path) -> None:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        Path(path).write_text("\n".join(lines) + "\n", "utf-8")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        values: dict[str, object] = {}
        for lineno, raw in enumerate(Path(path).read_text("utf-8").splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            key, _, text = line.partition("=")
            key, text = key.strip(), text.strip()
            if key not in known:
                raise DataError(f"{path}:{lineno}: unknown config key '{key}'")
            values[key] = _parse_config_value(key, text)
        return cls(**values)


def _parse_config_value(key: str, text: str):
    if key in ("alpha", "beta", "lr"):
        return float(text)
    if key in ("batch", "max_epochs", "max_frames", "patience"):
        return int(text)
    if key == "seeds":
        return tuple(int(v) for v in text.split(",") if v.strip() != "")
    if key == "snrs":
        return tuple(float(v) for v in text.split(",") if v.strip() != "")
    if key == "classify_calibrated":
        if text.lower() not in ("true", "false"):
            raise DataError(f"boolean expected for {key}, got '{text}'")
        return text.lower() == "true"
    return text


# ---------------------------------------------------------------------------
# feature views


def pad_or_truncate(feats: np.ndarray, max_frames: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Fix the frame count: truncate past ``max_frames`` or pad with the
    log-floor value; the mask marks real frames."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise DataError("pad_or_truncate expects a non-empty (T, F) matrix")
    t = feats.shape[0]
    mask = np.zeros(max_frames, dtype=bool)
    if t >= max_frames:
        out = feats[:max_frames].copy()
        mask[:] = True
    else:
        out = np.full((max_frames, feats.shape[1]), PAD_VALUE)
        out[:t] = feats
        mask[:t] = True
    return out, mask


@dataclass
class ExampleView:
    """One model input: padded features plus metadata.

    ``clean_feats`` exists only on training views; the property counts
    accesses so tests can audit that inference never touches targets.
    """

    utt_id: str
    label: int
    noisy: np.ndarray
    mask: np.ndarray
    enhanced: np.ndarray | None = None
    similarity: np.ndarray | None = None
    snr_db: float | None = None
    noise_set: str | None = None
    _clean: np.ndarray | None = None
    target_reads: int = 0

    @property
    def has_target(self) -> bool:
        return self._clean is not None

    @property
    def clean_feats(self) -> np.ndarray:
        if self._clean is None:
            raise DataError(f"clean target requested on inference view '{self.utt_id}'")
        self.target_reads += 1
        return self._clean


def make_view(
    clean_wave: Waveform,
    label: int,
    utt_id: str,
    enhancer: Enhancer | None,
    noise_wave: Waveform | None = None,
    snr_db: float | None = None,
    rng: np.random.Generator | None = None,
    with_target: bool = True,
    max_frames: int = 500,
    noise_set: str | None = None,
) -> ExampleView:
    """Mix (optionally), enhance (optionally), featurize, and pad."""
    if noise_wave is not None:
        if snr_db is None:
            raise DataError("snr_db required when mixing noise")
        mixture, _ = mix_at_snr(clean_wave, noise_wave, snr_db, rng)
    else:
        mixture = clean_wave

    noisy_raw = lmfb(mixture)
    noisy, mask = pad_or_truncate(noisy_raw, max_frames)

    enhanced = similarity = None
    if enhancer is not None:
        enhanced_wave = enhancer.enhance(mixture, clean_ref=clean_wave)
        enhanced_raw = lmfb(enhanced_wave)
        similarity = snr_aware.similarity_vector(noisy_raw, enhanced_raw)
        enhanced, _ = pad_or_truncate(enhanced_raw, max_frames)

    clean = None
    if with_target:
        clean, _ = pad_or_truncate(lmfb(clean_wave), max_frames)

    return ExampleView(
        utt_id=utt_id,
        label=label,
        noisy=noisy,
        mask=mask,
        enhanced=enhanced,
        similarity=similarity,
        snr_db=snr_db,
        noise_set=noise_set,
        _clean=clean,
    )


# ---------------------------------------------------------------------------
# model


@dataclass
class ForwardResult:
    logits: Tensor | None = None
    rep: Tensor | None = None
    coeff: Tensor | None = None
    raw_coeff: Tensor | None = None
    blended: Tensor | None = None
    calibrated: Tensor | None = None


class EmotionModel:
    """Parameter container + forward/loss graph builder for one kind."""

    def __init__(
        self,
        config: TrainConfig,
        params: dict[str, Tensor],
        norm_mean: np.ndarray,
        norm_std: np.ndarray,
        frozen: ser.FrozenEncoder | None = None,
    ):
        self.config = config
        self.params = params
        self.norm_mean = norm_mean
        self.norm_std = norm_std
        self.frozen = frozen
        self._ref_rep_cache: dict[str, np.ndarray] = {}

    @classmethod
    def build(
        cls,
        config: TrainConfig,
        seed: int,
        norm_mean: np.ndarray,
        norm_std: np.ndarray,
        frozen: ser.FrozenEncoder | None = None,
    ) -> "EmotionModel":
        params = ser.init_encoder_params(generator("model-init", seed))
        if config.is_coupled:
            params.update(snr_aware.init_params())
            params.update(bridge.init_params())
        return cls(config, params, norm_mean, norm_std, frozen)

    @classmethod
    def from_checkpoint(cls, config: TrainConfig, path, frozen=None) -> "EmotionModel":
        blocks = load_checkpoint(path)
        norm_mean = blocks.pop("norm.mean")
        norm_std = blocks.pop("norm.std")
        params = {k: Tensor(v, requires_grad=True) for k, v in blocks.items()}
        return cls(config, params, norm_mean, norm_std, frozen)

    def checkpoint_blocks(self) -> dict[str, np.ndarray]:
        blocks = {k: p.data.copy() for k, p in self.params.items()}
        blocks["norm.mean"] = self.norm_mean.copy()
        blocks["norm.std"] = self.norm_std.copy()
        return blocks

    def save(self, path) -> None:
        save_checkpoint(path, self.checkpoint_blocks())

    # ---- forward -----------------------------------------------------

    def _input_features(self, views: list[ExampleView]) -> tuple[Tensor, ForwardResult]:
        kind = self.config.model_kind
        res = ForwardResult()
        if kind in ("baseline_c", "baseline_n"):
            return Tensor(np.stack([v.noisy for v in views])), res
        if kind == "baseline_e":
            return Tensor(np.stack([v.enhanced for v in views])), res
        noisy = Tensor(np.stack([v.noisy for v in views]))
        enhanced = Tensor(np.stack([v.enhanced for v in views]))
        sims = np.stack([v.similarity for v in views])
        raw, coeff = snr_aware.estimate_coefficient(
            sims, self.params["snr.weight"], self.params["snr.bias"]
        )
        blended = snr_aware.compensate(noisy, enhanced, coeff)
        res.raw_coeff, res.coeff, res.blended = raw, coeff, blended
        return blended, res

    def forward(self, views: list[ExampleView]) -> ForwardResult:
        feats, res = self._input_features(views)
        mask = np.stack([v.mask for v in views])
        rep = ser.encode(feats, mask, self.params, self.norm_mean, self.norm_std)
        res.rep = rep
        head_input = rep
        if self.config.is_coupled:
            calibrated = bridge.calibrate(rep, res.coeff, self.params)
            res.calibrated = calibrated
            if self.config.classify_calibrated:
                head_input = calibrated
        res.logits = ser.classify(head_input, self.params["cls.w"], self.params["cls.b"])
        return res

    # ---- losses --------------------------------------------------------

    def reference_representations(self, views: list[ExampleView]) -> np.ndarray:
        """Frozen-twin representations of the clean targets (cached by id)."""
        if self.frozen is None:
            raise DataError("frozen clean reference required for the representation loss")
        missing = [v for v in views if v.utt_id not in self._ref_rep_cache]
        if missing:
            feats = np.stack([v.clean_feats for v in missing])
            masks = np.stack([v.mask for v in missing])
            reps = self.frozen.represent(feats, masks)
            for v, r in zip(missing, reps):
                self._ref_rep_cache[v.utt_id] = r
        return np.stack([self._ref_rep_cache[v.utt_id] for v in views])

    def loss(self, views: list[ExampleView]) -> tuple[Tensor, dict[str, float], ForwardResult]:
        labels = np.array([v.label for v in views], dtype=np.int64)
        res = self.forward(views)
        task = ag.cross_entropy(res.logits, labels)
        parts = {"loss_task": task.item()}
        if not self.config.is_coupled:
            parts["loss"] = task.item()
            return task, parts, res

        alpha, beta = self.config.effective_weights()
        clean = Tensor(np.stack([v.clean_feats for v in views]))
        masks = np.stack([v.mask for v in views])
        feat_loss = snr_aware.feature_match_loss(clean, res.blended, masks)
        if beta != 0.0:
            refs = self.reference_representations(views)
            rep_loss = bridge.representation_match_loss(Tensor(refs), res.calibrated)
        else:
            rep_loss = Tensor(0.0)
        total = ag.add(task, ag.add(ag.mul(feat_loss, alpha), ag.mul(rep_loss, beta)))
        parts.update(
            loss_feature=feat_loss.item(),
            loss_rep=rep_loss.item(),
            loss=total.item(),
        )
        return total, parts, res

    def trainable(self) -> dict[str, Tensor]:
        return self.params


def run_inference(model: EmotionModel, views: list[ExampleView], batch: int = 32) -> dict:
    """Red-arrow path only: predictions plus per-view coefficients."""
    preds: list[np.ndarray] = []
    coeffs: list[np.ndarray] = []
    with ag.no_grad():
        for i in range(0, len(views), batch):
            chunk = views[i : i + batch]
            res = model.forward(chunk)
            preds.append(ser.predict(res.logits.data))
            if res.coeff is not None:
                coeffs.append(res.coeff.data)
    return {
        "pred": np.concatenate(preds) if preds else np.zeros(0, dtype=int),
        "label": np.array([v.label for v in views], dtype=np.int64),
        "coeff": np.concatenate(coeffs) if coeffs else None,
        "snr_db": [v.snr_db for v in views],
    }


# ---------------------------------------------------------------------------
# training data assembly


class _FoldData:
    """Waveforms and fixed views for one cross-validation fold."""

    def __init__(self, manifest: Manifest, fold, config: TrainConfig, seed: int):
        self.manifest = manifest
        self.config = config
        self.seed = seed
        self.enhancer = make_enhancer(config.enhancer) if config.needs_enhancer() else None
        train_sessions = set(fold.train_sessions)
        self.train_utts = [u for u in manifest.utterances if u.session in train_sessions]
        self.val_utts = [u for u in manifest.utterances if u.speaker == fold.val_speaker]
        if not self.train_utts or not self.val_utts:
            raise DataError("fold produced an empty train or validation split")
        self.matched_noises = manifest.noises_in_set("matched")
        if config.model_kind != "baseline_c" and not self.matched_noises:
            raise DataError("manifest has no matched-set noises for noisy training")
        self._waves: dict[str, Waveform] = {}
        self._noise_waves: dict[str, Waveform] = {}
        self._clean_views: dict[str, ExampleView] = {}

    def wave(self, rec: UtteranceRecord) -> Waveform:
        if rec.id not in self._waves:
            self._waves[rec.id] = read_wav(self.manifest.utterance_path(rec))
        return self._waves[rec.id]

    def noise_wave(self, rec: NoiseRecord) -> Waveform:
        if rec.id not in self._noise_waves:
            self._noise_waves[rec.id] = read_wav(self.manifest.noise_path(rec))
        return self._noise_waves[rec.id]

    def clean_view(self, rec: UtteranceRecord, with_target: bool) -> ExampleView:
        key = f"{rec.id}|{with_target}"
        if key not in self._clean_views:
            self._clean_views[key] = make_view(
                self.wave(rec),
                EMOTION_TO_LABEL[rec.emotion],
                rec.id,
                self.enhancer,
                with_target=with_target,
                max_frames=self.config.max_frames,
            )
        return self._clean_views[key]

    def noisy_view(
        self, rec: UtteranceRecord, noise: NoiseRecord, snr_db: float,
        rng: np.random.Generator, with_target: bool,
    ) -> ExampleView:
        return make_view(
            self.wave(rec),
            EMOTION_TO_LABEL[rec.emotion],
            rec.id,
            self.enhancer,
            noise_wave=self.noise_wave(noise),
            snr_db=snr_db,
            rng=rng,
            with_target=with_target,
            max_frames=self.config.max_frames,
            noise_set=noise.noise_set,
        )

    def epoch_training_views(self, epoch: int) -> list[ExampleView]:
        """Each training utterance once clean and (except baseline_c) once
        with a freshly drawn matched noise + SNR."""
        views = [self.clean_view(u, with_target=True) for u in self.train_utts]
        if self.config.model_kind == "baseline_c":
            return views
        for u in self.train_utts:
            rng = generator("pairing", self.seed, epoch, u.id)
            noise = self.matched_noises[int(rng.integers(len(self.matched_noises)))]
            snr = float(self.config.snrs[int(rng.integers(len(self.config.snrs)))])
            views.append(self.noisy_view(u, noise, snr, rng, with_target=True))
        return views

    def validation_views(self) -> list[ExampleView]:
        """Fixed views for model selection: clean for baseline_c, clean +
        one matched-noise view per SNR otherwise (pairing is seeded once)."""
        views = [self.clean_view(u, with_target=False) for u in self.val_utts]
        if self.config.model_kind == "baseline_c":
            return views
        for u in self.val_utts:
            for snr in self.config.snrs:
                rng = generator("val-pairing", self.seed, u.id, snr)
                noise = self.matched_noises[int(rng.integers(len(self.matched_noises)))]
                views.append(self.noisy_view(u, noise, float(snr), rng, with_target=False))
        return views


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    best_epoch: int
    best_val_uar: float
    epochs_run: int
    frozen_checksum_before: str | None = None
    frozen_checksum_after: str | None = None


def _val_metrics(model: EmotionModel, views: list[ExampleView]) -> dict:
    out = run_inference(model, views, batch=model.config.batch)
    cm = confusion_matrix(out["label"], out["pred"])
    metrics = {"uar": _uar(cm), "war": _war(cm)}
    if out["coeff"] is not None:
        per_snr: dict[str, float] = {}
        snrs = np.array([s if s is not None else np.nan for s in out["snr_db"]])
        for snr in sorted({s for s in out["snr_db"] if s is not None}):
            sel = snrs == snr
            per_snr[f"{snr:g}"] = float(np.mean(out["coeff"][sel]))
        clean_sel = np.isnan(snrs)
        if clean_sel.any():
            per_snr["clean"] = float(np.mean(out["coeff"][clean_sel]))
        metrics["mean_c"] = per_snr
    return metrics


def train(
    config: TrainConfig,
    manifest: Manifest,
    fold,
    seed: int,
    out_dir,
) -> TrainResult:
    """Train one model kind on one fold with one seed; deterministic for
    identical (config, seed). Writes checkpoint.bin, config.txt, and a
    JSON-lines training log into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.to_file(out / "config.txt")

    data = _FoldData(manifest, fold, config, seed)

    frozen = None
    checksum_before = checksum_after = None
    if config.is_coupled:
        if not config.frozen_checkpoint:
            raise DataError(f"'{config.model_kind}' requires frozen_checkpoint in the config")
        frozen = ser.FrozenEncoder(load_checkpoint(config.frozen_checkpoint))
        checksum_before = frozen.checksum()
        norm_mean, norm_std = frozen.norm_mean.copy(), frozen.norm_std.copy()
    else:
        clean_feats = [lmfb(data.wave(u)) for u in data.train_utts]
        norm_mean, norm_std = ser.compute_norm_stats(clean_feats)

    model = EmotionModel.build(config, seed, norm_mean, norm_std, frozen)
    optimizer = Adam(model.trainable(), lr=config.lr)
    val_views = data.validation_views()

    log_lines: list[str] = []

    def log(obj: dict) -> None:
        log_lines.append(json.dumps(obj, sort_keys=True))

    best_uar = -1.0
    best_epoch = 0
    best_blocks: dict[str, np.ndarray] | None = None
    epochs_run = 0

    val = _val_metrics(model, val_views)
    log({"epoch": 0, "split": "val", **val})
    if val["uar"] > best_uar:
        best_uar, best_epoch = val["uar"], 0
        best_blocks = model.checkpoint_blocks()

    shuffle_rng = generator("shuffle", seed)
    for epoch in range(1, config.max_epochs + 1):
        views = data.epoch_training_views(epoch)
        order = shuffle_rng.permutation(len(views))
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(order), config.batch):
            batch = [views[i] for i in order[start : start + config.batch]]
            optimizer.zero_grad()
            total, parts, _ = model.loss(batch)
            ag.backward(total)
            optimizer.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        epochs_run = epoch
        train_means = {k: v / n_batches for k, v in sums.items()}
        log({"epoch": epoch, "split": "train", **train_means})

        val = _val_metrics(model, val_views)
        log({"epoch": epoch, "split": "val", **val})
        if val["uar"] > best_uar:
            best_uar, best_epoch = val["uar"], epoch
            best_blocks = model.checkpoint_blocks()
        elif epoch - best_epoch >= config.patience:
            break

    if config.is_coupled:
        checksum_after = frozen.checksum()

    ckpt_path = out / "checkpoint.bin"
    save_checkpoint(ckpt_path, best_blocks)
    log({"best_epoch": best_epoch, "best_val_uar": best_uar, "epochs_run": epochs_run})
    log_path = out / "log.jsonl"
    log_path.write_text("\n".join(log_lines) + "\n", "utf-8")

    return TrainResult(
        checkpoint_path=ckpt_path,
        log_path=log_path,
        best_epoch=best_epoch,
        best_val_uar=best_uar,
        epochs_run=epochs_run,
        frozen_checksum_before=checksum_before,
        frozen_checksum_after=checksum_after,
    )


def pretrain_clean(manifest: Manifest, seed: int, out_dir, fold=None, **overrides) -> TrainResult:
    """Train the clean-reference model (kind baseline_c) and return its
    result; the checkpoint then serves as the frozen twin."""
    if fold is None:
        from .evalkit import loso_splits

        fold = loso_splits(manifest)[0]
    config = TrainConfig(model_kind="baseline_c", enhancer="identity", **overrides)
    return train(config, manifest, fold, seed, out_dir)


def overfit_probe(
    config: TrainConfig,
    manifest: Manifest,
    fold,
    seed: int,
    batch_size: int = 32,
    max_steps: int = 300,
) -> int | None:
    """Train on one fixed batch until it is classified perfectly.

    Returns the step count at which training accuracy reached 100%, or
    None if ``max_steps`` was not enough.
    """
    data = _FoldData(manifest, fold, config, seed)
    rng = generator("overfit", seed)
    utts = list(data.train_utts)
    picks = [utts[i] for i in rng.choice(len(utts), size=batch_size, replace=False)]
    views: list[ExampleView] = []
    for i, u in enumerate(picks):
        if config.model_kind == "baseline_c" or i % 2 == 0:
            views.append(data.clean_view(u, with_target=True))
        else:
            noise = data.matched_noises[int(rng.integers(len(data.matched_noises)))]
            snr = float(config.snrs[int(rng.integers(len(config.snrs)))])
            views.append(data.noisy_view(u, noise, snr, rng, with_target=True))

    frozen = None
    if config.is_coupled:
        frozen = ser.FrozenEncoder(load_checkpoint(config.frozen_checkpoint))
        norm_mean, norm_std = frozen.norm_mean, frozen.norm_std
    else:
        norm_mean, norm_std = ser.compute_norm_stats([v.noisy for v in views])
    model = EmotionModel.build(config, seed, norm_mean, norm_std, frozen)
    optimizer = Adam(model.trainable(), lr=config.lr)

    labels = np.array([v.label for v in views])
    for step in range(1, max_steps + 1):
        optimizer.zero_grad()
        total, _, res = model.loss(views)
        preds = ser.predict(res.logits.data)
        if np.array_equal(preds, labels):
            return step
        ag.backward(total)
        optimizer.step()
    out = run_inference(model, views, batch=batch_size)
    return max_steps if np.array_equal(out["pred"], labels) else None
