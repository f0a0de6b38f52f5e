"""Coefficient-conditioned affine calibration of utterance representations.

Two scalar-to-vector affine layers map the SNR coefficient to a per-channel
scale and shift applied to the encoder output (feature-wise linear
modulation). At the identity initialization the calibration is a no-op for
every coefficient value, so training starts from the uncalibrated model.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DataError

REP_DIM = 256


def init_params(rep_dim: int = REP_DIM) -> dict[str, Tensor]:
    """Identity initialization: scale(c) = 1, shift(c) = 0 for all c."""
    return {
        "bridge.scale.w": Tensor(np.zeros(rep_dim), requires_grad=True),
        "bridge.scale.b": Tensor(np.ones(rep_dim), requires_grad=True),
        "bridge.shift.w": Tensor(np.zeros(rep_dim), requires_grad=True),
        "bridge.shift.b": Tensor(np.zeros(rep_dim), requires_grad=True),
    }


def calibrate(rep, coeff, params: dict[str, Tensor]) -> Tensor:
    """(scale_w * c + scale_b) * rep + (shift_w * c + shift_b).

    ``rep`` is (256,) or (N, 256); ``coeff`` a scalar or (N,) batch.
    """
    rep = ag.as_tensor(rep)
    coeff = ag.as_tensor(coeff)
    if rep.data.ndim == 2 and coeff.data.ndim == 1:
        coeff = ag.reshape(coeff, (coeff.data.shape[0], 1))
    scale = ag.add(ag.mul(coeff, params["bridge.scale.w"]), params["bridge.scale.b"])
    shift = ag.add(ag.mul(coeff, params["bridge.shift.w"]), params["bridge.shift.b"])
    return ag.add(ag.mul(scale, rep), shift)


def representation_match_loss(reference_rep, calibrated) -> Tensor:
    """Mean squared error between the clean-reference representation and
    the calibrated one (mean over channels, then over the batch)."""
    reference = ag.as_tensor(reference_rep)
    calibrated = ag.as_tensor(calibrated)
    if reference.shape != calibrated.shape:
        raise DataError(f"shape mismatch {reference.shape} vs {calibrated.shape}")
    return ag.mse(reference, calibrated)
