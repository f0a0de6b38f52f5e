"""Self-check suites: per-op gradient verification and DSP properties.

These run standalone (no corpus needed) so the CLI can verify a build
quickly. Inputs are sampled away from the kink neighborhoods of relu and
clamp, where central differences are uninformative about the analytic
(sub)gradient.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor, finite_diff_check
from .corpus import Waveform
from .dsp import istft, lmfb, measure_snr, mel_filterbank, mix_at_snr, stft
from .seeding import generator


def _away_from(rng, shape, kinks, margin=0.05, low=-1.5, high=1.5):
    """Uniform samples with a margin around each kink point."""
    x = rng.uniform(low, high, size=shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        while near.any():
            x[near] = rng.uniform(low, high, size=int(near.sum()))
            near = np.abs(x - k) < margin
    return x


def _scalarize(out: Tensor, rng) -> Tensor:
    weights = rng.normal(size=out.data.shape)
    return ag.sum(ag.mul(out, weights))


def gradient_suite(seed: int = 0, n_samples: int = 12, h: float = 1e-5) -> dict[str, float]:
    """Max relative finite-difference error per differentiable op."""
    rng = generator("gradcheck", seed)
    results: dict[str, float] = {}

    def check(name, build, params):
        results[name] = finite_diff_check(build, params, n_samples=n_samples, h=h, rng=rng)

    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    check("add", lambda: _scalarize(ag.add(a, b), generator("s", 0)), [a, b])
    check("sub", lambda: _scalarize(ag.sub(a, b), generator("s", 1)), [a, b])
    check("mul", lambda: _scalarize(ag.mul(a, b), generator("s", 2)), [a, b])

    m1 = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    m2 = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    v1 = Tensor(rng.normal(size=(4,)), requires_grad=True)
    t3 = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    check("matmul_2d", lambda: _scalarize(ag.matmul(m1, m2), generator("s", 3)), [m1, m2])
    check("matmul_mv", lambda: _scalarize(ag.matmul(m1, v1), generator("s", 4)), [m1, v1])
    check("matmul_vm", lambda: _scalarize(ag.matmul(v1, m2), generator("s", 5)), [v1, m2])
    check("matmul_3d2d", lambda: _scalarize(ag.matmul(t3, m2), generator("s", 6)), [t3, m2])
    check("matmul_3d1d", lambda: _scalarize(ag.matmul(t3, v1), generator("s", 7)), [t3, v1])

    r = Tensor(_away_from(rng, (4, 5), kinks=[0.0]), requires_grad=True)
    check("relu", lambda: _scalarize(ag.relu(r), generator("s", 8)), [r])
    th = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    check("tanh", lambda: _scalarize(ag.tanh(th), generator("s", 9)), [th])
    cl = Tensor(_away_from(rng, (4, 5), kinks=[0.0, 1.0], low=-0.5, high=1.5), requires_grad=True)
    check("clamp", lambda: _scalarize(ag.clamp(cl, 0.0, 1.0), generator("s", 10)), [cl])

    sm = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    check("softmax", lambda: _scalarize(ag.softmax(sm, axis=1), generator("s", 11)), [sm])
    mask = rng.uniform(size=(3, 6)) < 0.7
    mask[:, 0] = True
    msm = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    check(
        "masked_softmax",
        lambda: _scalarize(ag.masked_softmax(msm, mask, axis=1), generator("s", 12)),
        [msm],
    )

    red = Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
    check("sum", lambda: _scalarize(ag.sum(red, axis=1), generator("s", 13)), [red])
    check("mean", lambda: _scalarize(ag.mean(red, axis=(0, 2)), generator("s", 14)), [red])
    check("reshape", lambda: _scalarize(ag.reshape(red, (12, 5)), generator("s", 15)), [red])
    check("transpose", lambda: _scalarize(ag.transpose(red, (2, 0, 1)), generator("s", 16)), [red])

    p = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    target = rng.normal(size=(4, 6))
    check("mse", lambda: ag.mse(p, target), [p])
    logits = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    labels = rng.integers(0, 4, size=5)
    check("cross_entropy", lambda: ag.cross_entropy(logits, labels), [logits])

    cx = Tensor(rng.normal(size=(2, 3, 9, 7)), requires_grad=True)
    cw = Tensor(rng.normal(size=(4, 3, 5, 5)) * 0.2, requires_grad=True)
    cb = Tensor(rng.normal(size=4), requires_grad=True)
    check(
        "conv2d_s1",
        lambda: _scalarize(ag.conv2d(cx, cw, cb, stride=1), generator("s", 17)),
        [cx, cw, cb],
    )
    check(
        "conv2d_s2",
        lambda: _scalarize(ag.conv2d(cx, cw, cb, stride=2), generator("s", 18)),
        [cx, cw, cb],
    )
    pw = Tensor(rng.normal(size=(4, 3, 1, 1)), requires_grad=True)
    check(
        "conv2d_1x1",
        lambda: _scalarize(ag.conv2d(cx, pw, stride=2), generator("s", 19)),
        [cx, pw],
    )
    return results


def dsp_suite(seed: int = 0) -> dict[str, float]:
    """Named DSP property margins; all must sit inside their tolerances."""
    rng = generator("dspcheck", seed)
    results: dict[str, float] = {}

    x = Waveform(0.4 * rng.uniform(-1.0, 1.0, size=16000))
    recon = istft(stft(x)).samples
    interior = slice(400, recon.size - 400)
    results["istft_roundtrip_rel_err"] = float(
        np.max(np.abs(recon[interior] - x.samples[interior])) / np.max(np.abs(x.samples))
    )

    worst = 0.0
    for target in (0.0, 5.0, 10.0, 15.0, 20.0):
        speech = Waveform(0.3 * rng.standard_normal(16000))
        noise = Waveform(0.2 * rng.standard_normal(24000))
        _, scaled = mix_at_snr(speech, noise, target, rng)
        worst = max(worst, abs(measure_snr(speech, scaled) - target))
    results["snr_mixing_abs_err_db"] = float(worst)

    weights = mel_filterbank()
    results["filterbank_max_bin_weight"] = float(weights.sum(axis=0).max())
    results["filterbank_min_row_weight"] = float(weights.sum(axis=1).min())

    scaled = Waveform(2.0 * x.samples)
    shift = lmfb(scaled) - lmfb(x)
    results["lmfb_scale_shift_spread"] = float(shift.max() - shift.min())
    return results


def run_selfcheck(print_fn=print) -> bool:
    """Run both suites, print one line per check, return overall pass."""
    grads = gradient_suite()
    worst_op = max(grads, key=grads.get)
    ok = True
    for name, err in sorted(grads.items()):
        passed = err < 1e-4
        ok &= passed
        print_fn(f"grad {name:<16} max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}")
    print_fn(f"max gradient-check error: {grads[worst_op]:.3e} ({worst_op})")

    dsp = dsp_suite()
    checks = [
        ("istft_roundtrip_rel_err", dsp["istft_roundtrip_rel_err"] < 1e-6),
        ("snr_mixing_abs_err_db", dsp["snr_mixing_abs_err_db"] < 1e-6),
        ("filterbank_max_bin_weight", dsp["filterbank_max_bin_weight"] <= 1.0 + 1e-9),
        ("filterbank_min_row_weight", dsp["filterbank_min_row_weight"] > 0.0),
        ("lmfb_scale_shift_spread", dsp["lmfb_scale_shift_spread"] < 1e-9),
    ]
    for name, passed in checks:
        ok &= passed
        print_fn(f"dsp  {name:<26} value={dsp[name]:.3e} {'ok' if passed else 'FAIL'}")
    return ok
