"""Multimodal haptic perception pipeline.

Synthetic grasp-trial generation, signal conditioning, nine-channel
featurization with contact detection, dataset filtering, a hand-rolled
time-series material/compliance classifier, visual-prior fusion, and
uncertainty-aware evaluation, wired together by the `clamp` CLI.
"""

__version__ = "0.1.0"
