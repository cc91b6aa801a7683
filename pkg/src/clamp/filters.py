"""Signal conditioning for aligned sensor traces.

Everything here operates on 1-D float arrays and is causal except the
Savitzky-Golay smoother, which uses a symmetric window and is applied
offline to complete traces. NaN-free input guarantees NaN-free output.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as _scipy_signal


@dataclass(frozen=True)
class FilterConfig:
    """Conditioning parameters shared by the featurization pipeline."""

    butterworth_order: int = 2
    butterworth_cutoff_hz: float = 5.0
    moving_avg_window: int = 5
    sg_window: int = 11
    sg_poly: int = 3
    mic_target_rate_hz: float = 50.0
    sample_rate_hz: float = 50.0

    def __post_init__(self) -> None:
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.butterworth_order < 1:
            raise ValueError("butterworth_order must be >= 1")
        nyquist = self.sample_rate_hz / 2.0
        if not 0.0 < self.butterworth_cutoff_hz < nyquist:
            raise ValueError(
                f"butterworth_cutoff_hz must lie in (0, {nyquist}); got {self.butterworth_cutoff_hz}"
            )
        if self.moving_avg_window < 1:
            raise ValueError("moving_avg_window must be >= 1")
        if self.sg_window % 2 == 0 or self.sg_window < 3:
            raise ValueError("sg_window must be odd and >= 3")
        if not 0 <= self.sg_poly < self.sg_window:
            raise ValueError("sg_poly must satisfy 0 <= poly < window")
        if self.mic_target_rate_hz <= 0:
            raise ValueError("mic_target_rate_hz must be positive")


def butterworth_lowpass(x: np.ndarray, cfg: FilterConfig) -> np.ndarray:
    """Causal Butterworth low-pass with unit DC gain.

    The filter state is initialized to the steady state of the first
    sample, so a constant input maps to the same constant output instead
    of ringing up from zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a 1-D series")
    if x.size == 0:
        return x.copy()
    b, a = _scipy_signal.butter(
        cfg.butterworth_order, cfg.butterworth_cutoff_hz, btype="low", fs=cfg.sample_rate_hz
    )
    zi = _scipy_signal.lfilter_zi(b, a) * x[0]
    y, _ = _scipy_signal.lfilter(b, a, x, zi=zi)
    return y


def causal_moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average with an expanding head.

    y[t] averages x[max(0, t-window+1) .. t], so the first window-1
    samples average everything seen so far rather than zero-padding.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a 1-D series")
    n = x.size
    if n == 0 or window == 1:
        return x.copy()
    csum = np.concatenate(([0.0], np.cumsum(x)))
    y = np.empty(n, dtype=np.float64)
    head = min(window, n)
    y[:head] = csum[1 : head + 1] / np.arange(1, head + 1)
    if n > window:
        y[window:] = (csum[window + 1 :] - csum[1 : n - window + 1]) / window
    return y


def _sg_interior_kernel(window: int, poly: int) -> np.ndarray:
    half = window // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    vand = np.vander(offsets, poly + 1, increasing=True)
    # Row 0 of the pseudo-inverse evaluates the fitted polynomial at 0.
    return np.linalg.pinv(vand)[0]


def savitzky_golay(x: np.ndarray, window: int, poly: int) -> np.ndarray:
    """Least-squares polynomial smoother with shrinking edge fits.

    Interior samples use the symmetric window; near the edges the window
    shrinks to what is available and the polynomial degree drops if the
    shrunk window cannot support it. Polynomials of degree <= poly pass
    through unchanged on the interior.
    """
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be odd and >= 3")
    if not 0 <= poly < window:
        raise ValueError("poly must satisfy 0 <= poly < window")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a 1-D series")
    n = x.size
    if window > n:
        raise ValueError(f"window {window} exceeds series length {n}")
    half = window // 2
    y = np.empty(n, dtype=np.float64)
    kernel = _sg_interior_kernel(window, poly)
    y[half : n - half] = np.convolve(x, kernel[::-1], mode="valid")
    for i in range(n):
        if half <= i < n - half:
            continue
        lo = max(0, i - half)
        hi = min(n, i + half + 1)
        pts = hi - lo
        deg = min(poly, pts - 1)
        offsets = np.arange(lo - i, hi - i, dtype=np.float64)
        vand = np.vander(offsets, deg + 1, increasing=True)
        coef, *_ = np.linalg.lstsq(vand, x[lo:hi], rcond=None)
        y[i] = coef[0]
    return y


def condition_mic(mic: np.ndarray, target_len: int) -> np.ndarray:
    """Contact-mic conditioning: debias, halve the rate, fit the length.

    The mic samples at twice the grid rate; adjacent pairs are averaged
    down to the grid (block mean, not subsampling, so vibration energy is
    not aliased). The result is zero-mean; length fitting pads with zeros
    or truncates.
    """
    if target_len < 0:
        raise ValueError("target_len must be >= 0")
    mic = np.asarray(mic, dtype=np.float64)
    if mic.ndim != 1:
        raise ValueError("expected a 1-D series")
    if mic.size == 0:
        raise ValueError("mic series is empty")
    even = mic[: mic.size - (mic.size % 2)]
    if even.size == 0:
        return np.zeros(target_len, dtype=np.float64)
    debiased = even - even.mean()
    half = (debiased[0::2] + debiased[1::2]) / 2.0
    if half.size >= target_len:
        return half[:target_len].copy()
    out = np.zeros(target_len, dtype=np.float64)
    out[: half.size] = half
    return out


def condition_linear_acceleration(
    accel: np.ndarray, cfg: FilterConfig | None = None
) -> np.ndarray:
    """Condition a relative linear-acceleration series.

    Smooth, remove the bias estimated from the final 50 samples, then
    remove the residual linear drift through the first and last samples.
    A pure linear ramp maps to zero; a trace with a stationary tail keeps
    its tail at zero.
    """
    cfg = cfg or FilterConfig()
    accel = np.asarray(accel, dtype=np.float64)
    if accel.ndim != 1:
        raise ValueError("expected a 1-D series")
    n = accel.size
    if n < 50:
        raise ValueError(f"need at least 50 samples to estimate bias; got {n}")
    smooth = savitzky_golay(accel, cfg.sg_window, cfg.sg_poly)
    resid = smooth - smooth[-50:].mean()
    k = np.arange(n, dtype=np.float64) / (n - 1)
    return resid - (resid[0] + (resid[-1] - resid[0]) * k)
