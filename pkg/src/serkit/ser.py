"""Residual convolutional utterance encoder, attention pooling over time,
and the 4-way emotion classifier.

The encoder consumes fixed-size (500, 80) log-mel inputs with a boolean
frame mask. Four stride-2 conv blocks (5x5 kernels, channels 32/64/128/256,
1x1 projection shortcuts) reduce time/frequency by 16x each; frequency is
average-pooled away and attention pooling aggregates the remaining frame
sequence into a 256-dim representation. Input normalization uses fixed
per-band statistics estimated from clean training features, so inference
is deterministic and batch-size independent.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import autograd as ag
from .autograd import Tensor, same_padding
from .errors import DataError

N_FRAMES = 500
N_BANDS = 80
N_CLASSES = 4
CHANNELS = (32, 64, 128, 256)
KERNEL = 5
STRIDE = 2
REP_DIM = 256


def init_encoder_params(rng: np.random.Generator) -> dict[str, Tensor]:
    """He-initialized conv blocks plus attention and classifier layers."""
    params: dict[str, Tensor] = {}
    c_in = 1
    for i, c_out in enumerate(CHANNELS):
        fan_in = c_in * KERNEL * KERNEL
        params[f"enc.block{i}.conv.w"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, KERNEL, KERNEL)),
            requires_grad=True,
        )
        params[f"enc.block{i}.conv.b"] = Tensor(np.zeros(c_out), requires_grad=True)
        params[f"enc.block{i}.proj.w"] = Tensor(
            rng.normal(0.0, np.sqrt(1.0 / c_in), size=(c_out, c_in, 1, 1)),
            requires_grad=True,
        )
        c_in = c_out
    params["enc.attn.W"] = Tensor(
        rng.normal(0.0, np.sqrt(1.0 / REP_DIM), size=(REP_DIM, REP_DIM)), requires_grad=True
    )
    params["enc.attn.b"] = Tensor(np.zeros(REP_DIM), requires_grad=True)
    params["enc.attn.v"] = Tensor(
        rng.normal(0.0, np.sqrt(1.0 / REP_DIM), size=REP_DIM), requires_grad=True
    )
    limit = np.sqrt(6.0 / (REP_DIM + N_CLASSES))
    params["cls.w"] = Tensor(
        rng.uniform(-limit, limit, size=(REP_DIM, N_CLASSES)), requires_grad=True
    )
    params["cls.b"] = Tensor(np.zeros(N_CLASSES), requires_grad=True)
    return params


def compute_norm_stats(features: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-band mean/std over the concatenated (unpadded) frames."""
    stacked = np.concatenate(features, axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), 1e-6)
    return mean, std


def downsample_mask(frame_mask: np.ndarray, n_layers: int = len(CHANNELS)) -> np.ndarray:
    """Propagate the real-frame mask through the stride-2 conv stack.

    A downsampled frame stays unmasked iff any input frame in its
    receptive field is real.
    """
    mask = np.atleast_2d(np.asarray(frame_mask, dtype=bool))
    for _ in range(n_layers):
        size = mask.shape[1]
        out, pad_top, _ = same_padding(size, KERNEL, STRIDE)
        padded = np.pad(mask, ((0, 0), (pad_top, KERNEL)))
        windows = np.stack(
            [padded[:, k : k + (out - 1) * STRIDE + 1 : STRIDE] for k in range(KERNEL)], axis=2
        )
        mask = windows.any(axis=2)
    return mask if np.asarray(frame_mask).ndim == 2 else mask[0]


def attention_pool(frames, mask: np.ndarray, w, b, v) -> Tensor:
    """Score frames with v^T tanh(W f + b), softmax over unmasked frames,
    return the weighted sum. Accepts (T, C) or batched (N, T, C)."""
    frames = ag.as_tensor(frames)
    single = frames.data.ndim == 2
    if single:
        frames = ag.reshape(frames, (1,) + frames.data.shape)
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if mask.shape != frames.data.shape[:2]:
        raise DataError(f"mask shape {mask.shape} mismatches frames {frames.data.shape[:2]}")
    scores = ag.matmul(ag.tanh(ag.add(ag.matmul(frames, w), b)), v)
    alpha = ag.masked_softmax(scores, mask, axis=1)
    alpha3 = ag.reshape(alpha, alpha.data.shape + (1,))
    pooled = ag.sum(ag.mul(alpha3, frames), axis=1)
    return ag.reshape(pooled, (pooled.data.shape[-1],)) if single else pooled


# Receptive field of the four stacked 5x5/s2 convs at the input level,
# plus slack for the 'same'-padding offsets.
_RF_MARGIN = 72


def trim_length(frame_mask: np.ndarray, total: int = N_FRAMES) -> int:
    """Shortest prefix that provably yields the same pooled output.

    Rows past the last real frame plus the conv stack's receptive field
    only feed fully-masked (zero-attention) positions, so they can be
    dropped. The cut is restricted to lengths congruent to ``total`` mod 16
    so every layer's 'same'-padding alignment matches the untrimmed run.
    """
    mask = np.atleast_2d(frame_mask)
    last_real = int(np.max(np.nonzero(mask.any(axis=0))[0])) + 1 if mask.any() else total
    need = last_real + _RF_MARGIN
    if need >= total:
        return total
    remainder = total % 16
    cut = need + ((remainder - need) % 16)
    return min(cut, total)


def encode(
    features,
    frame_mask: np.ndarray,
    params: dict[str, Tensor],
    norm_mean: np.ndarray,
    norm_std: np.ndarray,
    trim: bool = True,
) -> Tensor:
    """Map (N, 500, 80) features + mask to (N, 256) representations."""
    x = ag.as_tensor(features)
    single = x.data.ndim == 2
    if single:
        x = ag.reshape(x, (1,) + x.data.shape)
    if x.data.shape[1:] != (N_FRAMES, N_BANDS):
        raise DataError(f"encoder expects (N, {N_FRAMES}, {N_BANDS}), got {x.data.shape}")
    mask = np.atleast_2d(np.asarray(frame_mask, dtype=bool))

    n_frames = N_FRAMES
    if trim:
        n_frames = trim_length(mask)
        if n_frames < N_FRAMES:
            x = ag.narrow(x, 1, 0, n_frames)
            mask = mask[:, :n_frames]

    x = ag.mul(ag.sub(x, norm_mean), 1.0 / norm_std)
    n = x.data.shape[0]
    x = ag.reshape(x, (1, n, n_frames, N_BANDS))  # channel-major, C=1
    for i in range(len(CHANNELS)):
        main = ag.relu(
            ag.conv2d_channel_major(
                x, params[f"enc.block{i}.conv.w"], params[f"enc.block{i}.conv.b"], stride=STRIDE
            )
        )
        shortcut = ag.conv2d_channel_major(x, params[f"enc.block{i}.proj.w"], stride=STRIDE)
        x = ag.add(main, shortcut)
    x = ag.mean(x, axis=3)  # (C, N, T') average over frequency
    frames = ag.transpose(x, (1, 2, 0))  # (N, T', C)
    pooled = attention_pool(
        frames, downsample_mask(mask), params["enc.attn.W"], params["enc.attn.b"], params["enc.attn.v"]
    )
    return ag.reshape(pooled, (REP_DIM,)) if single else pooled


def classify(rep, w, b) -> Tensor:
    """Linear 256 -> 4 logits."""
    return ag.add(ag.matmul(ag.as_tensor(rep), w), b)


def predict(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=-1)


def params_checksum(params: dict[str, np.ndarray | Tensor]) -> str:
    """Stable digest over named arrays (frozen-parameter audits)."""
    digest = hashlib.sha256()
    for name in sorted(params):
        arr = params[name]
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return digest.hexdigest()


class FrozenEncoder:
    """Read-only encoder + classifier loaded from checkpoint blocks.

    Used as the clean-reference twin during training: its parameters are
    constants (no tape is recorded through them) and its checksum can be
    compared before/after a training run.
    """

    def __init__(self, blocks: dict[str, np.ndarray]):
        needed = set(init_encoder_params(np.random.default_rng(0)))
        missing = needed - set(blocks)
        if missing:
            raise DataError(f"frozen checkpoint missing parameters: {sorted(missing)}")
        if "norm.mean" not in blocks or "norm.std" not in blocks:
            raise DataError("frozen checkpoint missing normalization statistics")
        self.params = {k: Tensor(blocks[k].copy()) for k in needed}
        self.norm_mean = blocks["norm.mean"].copy()
        self.norm_std = blocks["norm.std"].copy()

    def represent(self, features: np.ndarray, frame_mask: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            rep = encode(features, frame_mask, self.params, self.norm_mean, self.norm_std)
        return rep.data

    def logits(self, features: np.ndarray, frame_mask: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            rep = encode(features, frame_mask, self.params, self.norm_mean, self.norm_std)
            return classify(rep, self.params["cls.w"], self.params["cls.b"]).data

    def checksum(self) -> str:
        blocks = {k: v.data for k, v in self.params.items()}
        blocks["norm.mean"] = self.norm_mean
        blocks["norm.std"] = self.norm_std
        return params_checksum(blocks)


def pretrain_clean(manifest, seed: int, out_dir, **overrides):
    """Train the clean-reference encoder (clean-data-only model) and return
    the checkpoint path; delegates to the trainer."""
    from . import trainer

    return trainer.pretrain_clean(manifest, seed, out_dir, **overrides)
