"""Noise-robust speech emotion recognition at desk scale.

Subpackages: synthetic corpus + manifests (corpus), signal processing
(dsp), frozen enhancers (enhance), the float64 autodiff engine (autograd),
SNR-aware feature blending (snr_aware), the utterance encoder (ser),
representation calibration (bridge), training (trainer), and evaluation
(evalkit). The ``serkit`` console script orchestrates everything.
"""

__version__ = "0.1.0"
