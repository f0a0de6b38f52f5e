"""SNR coefficient estimation and feature compensation.

The per-band cosine similarity between noisy and enhanced log-mel
spectrograms is mapped through a trainable affine layer and clipped to
[0, 1], producing a coefficient that weights a convex blend of the two
spectrograms: high coefficients keep the noisy features (trustworthy at
high SNR), low coefficients lean on the enhancer output.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DataError

N_BANDS = 80


def similarity_vector(noisy_feats: np.ndarray, enhanced_feats: np.ndarray) -> np.ndarray:
    """Cosine similarity between corresponding frequency columns.

    Both inputs are (T, F) log-mel matrices; the result is a length-F
    vector with entries in [-1, 1]. Columns with zero norm on either side
    contribute 0 (they carry no SNR information).
    """
    if noisy_feats.shape != enhanced_feats.shape:
        raise DataError(
            f"spectrogram shape mismatch {noisy_feats.shape} vs {enhanced_feats.shape}"
        )
    dots = np.einsum("tf,tf->f", noisy_feats, enhanced_feats)
    norms = np.linalg.norm(noisy_feats, axis=0) * np.linalg.norm(enhanced_feats, axis=0)
    out = np.zeros(noisy_feats.shape[1])
    np.divide(dots, norms, out=out, where=norms > 0)
    return np.clip(out, -1.0, 1.0)


def init_params(n_bands: int = N_BANDS) -> dict[str, Tensor]:
    """Affine layer initialized to the mean of the similarity vector, so a
    clean pair (similarity ~= 1) maps to a coefficient of ~1."""
    return {
        "snr.weight": Tensor(np.full(n_bands, 1.0 / n_bands), requires_grad=True),
        "snr.bias": Tensor(np.zeros(()), requires_grad=True),
    }


def estimate_coefficient(similarity, weight, bias) -> tuple[Tensor, Tensor]:
    """(raw, clipped) coefficient from a similarity vector or a batch of
    them; gradient passes through the whole closed interval [0, 1]."""
    raw = ag.add(ag.matmul(ag.as_tensor(similarity), weight), bias)
    return raw, ag.clamp(raw, 0.0, 1.0)


def compensate(noisy_feats, enhanced_feats, coeff) -> Tensor:
    """Convex blend: coeff * noisy + (1 - coeff) * enhanced.

    At coeff exactly 0 or 1 the result is bit-identical to the
    corresponding input. ``coeff`` may be a scalar or a per-utterance
    batch aligned with leading dimensions.
    """
    noisy_feats = ag.as_tensor(noisy_feats)
    enhanced_feats = ag.as_tensor(enhanced_feats)
    if noisy_feats.shape != enhanced_feats.shape:
        raise DataError(
            f"spectrogram shape mismatch {noisy_feats.shape} vs {enhanced_feats.shape}"
        )
    coeff = ag.as_tensor(coeff)
    if coeff.data.ndim == 1 and noisy_feats.data.ndim == 3:
        coeff = ag.reshape(coeff, (coeff.data.shape[0], 1, 1))
    inv = ag.sub(1.0, coeff)
    return ag.add(ag.mul(coeff, noisy_feats), ag.mul(inv, enhanced_feats))


def feature_match_loss(target_feats, blended, frame_mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error between clean-target and blended features.

    With a frame mask, the mean runs over real (unpadded) frames only, per
    utterance, then over the batch, so the loss scale does not depend on
    utterance length.
    """
    target = ag.as_tensor(target_feats)
    blended = ag.as_tensor(blended)
    if target.shape != blended.shape:
        raise DataError(f"shape mismatch {target.shape} vs {blended.shape}")
    diff = ag.sub(target, blended)
    sq = ag.mul(diff, diff)
    if frame_mask is None:
        return ag.mean(sq)
    mask = np.asarray(frame_mask, dtype=bool)
    if sq.data.ndim == 2:
        mask3 = mask[:, None].astype(np.float64)
        scale = 1.0 / (mask.sum() * sq.data.shape[-1])
        return ag.mul(ag.sum(ag.mul(sq, mask3)), scale)
    n_batch, _, n_bands = sq.data.shape
    weights = mask[:, :, None] / (
        n_batch * n_bands * mask.sum(axis=1)[:, None, None].astype(np.float64)
    )
    return ag.sum(ag.mul(sq, weights))
