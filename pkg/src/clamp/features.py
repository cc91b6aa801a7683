"""Nine-channel featurization of aligned grasp trials.

Channel order is a frozen contract: [active_c, passive_c, force_v,
vibration, proprioception, d_active, d_passive, d_force, impedance].
Contact is detected independently per gripper cup (thermal rule on the
left, force rule on the right) and merged into one segment; channels are
cropped to the segment and padded or truncated to 491 timesteps.

Parallel-jaw embodiments have no thermal cups: their thermal channels
are zero, proprioception is conditioned relative linear acceleration,
impedance divides by acceleration instead of angular rate, and contact
detection uses the force rule alone.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .filters import (
    FilterConfig,
    butterworth_lowpass,
    causal_moving_average,
    condition_linear_acceleration,
    condition_mic,
)
from .ingest import AlignedTrial, SessionLabels
from .materials import EMBODIMENTS, SMALL_CLASSES, is_parallel_jaw

CHANNEL_NAMES: tuple[str, ...] = (
    "active_c",
    "passive_c",
    "force_v",
    "vibration",
    "proprioception",
    "d_active",
    "d_passive",
    "d_force",
    "impedance",
)
TENSOR_LEN = 491

# State-like channels extend with their final value; derivative-like
# channels (including the zero-mean vibration signal) extend with zero.
LAST_VALUE_PAD_CHANNELS = frozenset(
    {"active_c", "passive_c", "force_v", "proprioception"}
)

ACTIVE_DIFF_ONSET_C = -0.01
RELEASE_TEMP_MAX_C = 53.0
FORCE_CONTACT_V = 0.01
IMPEDANCE_OMEGA_FLOOR_DPS = 3.0
SLOW_GRASP_MIN_DPS = 1.0
INITIAL_TEMP_MIN_C = 51.0
THERMAL_PLAUSIBLE_C = (-20.0, 120.0)
THERMAL_FREEZE_WINDOW_SAMPLES = 100  # 2 s at 50 Hz

EXCLUSION_RULES = (
    "small_class",
    "initial_force",
    "initial_temp",
    "sensor_fault",
    "slow_grasp",
    "heterogeneous",
)

# IMU-2 is mounted with y2 tracking z1 and x2 rotated -25 degrees about
# z1. Columns are the images of IMU-2's basis axes in IMU-1's frame:
# x2 -> (c, -s, 0), y2 -> (0, 0, 1), z2 = x2 cross y2 -> (-s, -c, 0).
MOUNT_ANGLE_DEG = -25.0
_C = float(np.cos(np.deg2rad(25.0)))
_S = float(np.sin(np.deg2rad(25.0)))
MOUNT_ROTATION = np.array(
    [
        [_C, 0.0, -_S],
        [-_S, 0.0, -_C],
        [0.0, 1.0, 0.0],
    ]
)


class NoContactError(ValueError):
    """Raised when a trial shows no contact on either cup."""


# --------------------------------------------------------------------------
# Per-channel ops


def relative_angular_velocity(gyro1: np.ndarray, gyro2: np.ndarray) -> np.ndarray:
    """Finger rotation rate relative to the body, about IMU-1's z axis.

    Rotates IMU-2 rates into IMU-1's frame via the fixed mount rotation
    and returns (R @ w2 - w1)_z per timestep, in deg/s.
    """
    g1 = np.asarray(gyro1, dtype=np.float64)
    g2 = np.asarray(gyro2, dtype=np.float64)
    if g1.shape != g2.shape or g1.ndim != 2 or g1.shape[1] != 3:
        raise ValueError("expected matching (n, 3) gyro arrays")
    rotated = g2 @ MOUNT_ROTATION.T
    return rotated[:, 2] - g1[:, 2]


def relative_linear_acceleration(accel1: np.ndarray, accel2: np.ndarray) -> np.ndarray:
    """Finger acceleration relative to the body along IMU-1's z axis (g)."""
    a1 = np.asarray(accel1, dtype=np.float64)
    a2 = np.asarray(accel2, dtype=np.float64)
    if a1.shape != a2.shape or a1.ndim != 2 or a1.shape[1] != 3:
        raise ValueError("expected matching (n, 3) accel arrays")
    rotated = a2 @ MOUNT_ROTATION.T
    return rotated[:, 2] - a1[:, 2]


def diff_feature(x: np.ndarray) -> np.ndarray:
    """One-sample backward difference with y[0] = 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ValueError("expected a non-empty 1-D series")
    y = np.empty_like(x)
    y[0] = 0.0
    y[1:] = x[1:] - x[:-1]
    return y


def impedance(
    force_diff: np.ndarray,
    omega: np.ndarray,
    delta: float = IMPEDANCE_OMEGA_FLOOR_DPS,
) -> np.ndarray:
    """Z[t] = F'[t] / w[t] where the rate clears the floor, else 0.

    The floor is inclusive: w == delta produces F'/delta.
    """
    if delta <= 0:
        raise ValueError("delta must be > 0")
    fd = np.asarray(force_diff, dtype=np.float64)
    w = np.asarray(omega, dtype=np.float64)
    if fd.shape != w.shape or fd.ndim != 1:
        raise ValueError("expected matching 1-D series")
    out = np.zeros_like(fd)
    mask = w >= delta
    out[mask] = fd[mask] / w[mask]
    return out


def impedance_linear(
    force_diff: np.ndarray, lin_acc: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Parallel-jaw impedance: F'/a with only a numerical zero guard."""
    fd = np.asarray(force_diff, dtype=np.float64)
    a = np.asarray(lin_acc, dtype=np.float64)
    if fd.shape != a.shape or fd.ndim != 1:
        raise ValueError("expected matching 1-D series")
    out = np.zeros_like(fd)
    mask = np.abs(a) >= eps
    out[mask] = fd[mask] / a[mask]
    return out


# --------------------------------------------------------------------------
# Contact detection


def detect_contact_left(active_c: np.ndarray) -> tuple[tuple[int, int], ...]:
    """Thermal-cup contact events as half-open [onset, release) pairs.

    Onset: the one-sample temperature difference drops below -0.01 C.
    Release: the difference turns positive while the sensor reads below
    53 C; the temperature gate keeps controller reheat from triggering a
    release mid-contact. An event still open at the end of the trace
    closes at its length.
    """
    x = np.asarray(active_c, dtype=np.float64)
    d = diff_feature(x)
    events: list[tuple[int, int]] = []
    onset = -1
    in_contact = False
    for t in range(x.size):
        if not in_contact:
            if d[t] < ACTIVE_DIFF_ONSET_C:
                onset = t
                in_contact = True
        elif d[t] > 0.0 and x[t] < RELEASE_TEMP_MAX_C:
            events.append((onset, t))
            in_contact = False
    if in_contact:
        events.append((onset, x.size))
    return tuple(events)


def detect_contact_right(force_v: np.ndarray) -> tuple[tuple[int, int], ...]:
    """Force-cup contact events as half-open [onset, release) pairs."""
    f = np.asarray(force_v, dtype=np.float64)
    if f.ndim != 1:
        raise ValueError("expected a 1-D series")
    events: list[tuple[int, int]] = []
    onset = -1
    in_contact = False
    for t in range(f.size):
        if not in_contact:
            if f[t] > FORCE_CONTACT_V:
                onset = t
                in_contact = True
        elif f[t] <= FORCE_CONTACT_V:
            events.append((onset, t))
            in_contact = False
    if in_contact:
        events.append((onset, f.size))
    return tuple(events)


@dataclass(frozen=True)
class ContactEvents:
    """Per-cup contact events and the merged segment window.

    Pairs and the segment are half-open index ranges. The segment is the
    union extent of both cups: earliest onset to latest release.
    """

    left: tuple[tuple[int, int], ...]
    right: tuple[tuple[int, int], ...]
    segment: tuple[int, int] | None

    @classmethod
    def from_detections(
        cls,
        left: Sequence[tuple[int, int]],
        right: Sequence[tuple[int, int]],
    ) -> "ContactEvents":
        spans = tuple(left) + tuple(right)
        for onset, release in spans:
            if onset >= release:
                raise ValueError("event onset must precede release")
        segment = None
        if spans:
            segment = (min(s for s, _ in spans), max(e for _, e in spans))
        return cls(left=tuple(left), right=tuple(right), segment=segment)


# --------------------------------------------------------------------------
# Tensor assembly


@dataclass
class FeatureTensor:
    """The 9 x 491 classifier input."""

    channels: np.ndarray
    embodiment: str
    valid_len: int

    def validate(self) -> None:
        if self.channels.shape != (len(CHANNEL_NAMES), TENSOR_LEN):
            raise ValueError(
                f"channels must be {len(CHANNEL_NAMES)} x {TENSOR_LEN}, "
                f"got {self.channels.shape}"
            )
        if self.embodiment not in EMBODIMENTS:
            raise ValueError(f"unknown embodiment {self.embodiment!r}")
        if not 1 <= self.valid_len <= TENSOR_LEN:
            raise ValueError("valid_len must lie in [1, 491]")


def segment_and_pad(
    channels: Mapping[str, np.ndarray],
    events: ContactEvents,
    embodiment: str = "clamp_device",
) -> FeatureTensor:
    """Crop all channels to the contact segment and fit to 491 steps.

    State-like channels extend with their last value, derivative-like
    channels with zero; segments longer than 491 keep the first 491.
    """
    if events.segment is None:
        raise NoContactError("no contact events on either cup")
    missing = [name for name in CHANNEL_NAMES if name not in channels]
    if missing:
        raise ValueError(f"missing channels: {missing}")
    start, end = events.segment
    data = np.zeros((len(CHANNEL_NAMES), TENSOR_LEN), dtype=np.float32)
    valid_len = min(end - start, TENSOR_LEN)
    for i, name in enumerate(CHANNEL_NAMES):
        series = np.asarray(channels[name], dtype=np.float64)
        if series.ndim != 1 or series.size < end:
            raise ValueError(f"channel {name} shorter than the segment")
        seg = series[start : start + valid_len]
        data[i, :valid_len] = seg
        if valid_len < TENSOR_LEN and name in LAST_VALUE_PAD_CHANNELS:
            data[i, valid_len:] = seg[-1]
    tensor = FeatureTensor(channels=data, embodiment=embodiment, valid_len=valid_len)
    tensor.validate()
    return tensor


# --------------------------------------------------------------------------
# Trial featurization

@dataclass
class TrialQC:
    """Per-trial quality facts consumed by the dataset filter."""

    initial_force_v: float
    initial_active_c: float | None
    thermal_fault: bool
    max_abs_prop: float
    gap_fraction: dict[str, float]


@dataclass
class FeaturizedTrial:
    object_id: str
    trial_index: int
    tensor: FeatureTensor
    events: ContactEvents
    qc: TrialQC
    labels: SessionLabels | None = None


def _thermal_fault(active_c: np.ndarray, passive_c: np.ndarray) -> bool:
    lo, hi = THERMAL_PLAUSIBLE_C
    for series in (active_c, passive_c):
        if series.size == 0:
            return True
        if series.min() < lo or series.max() > hi:
            return True
        w = THERMAL_FREEZE_WINDOW_SAMPLES
        if series.size >= w:
            windows = np.lib.stride_tricks.sliding_window_view(series, w)
            spans = windows.max(axis=1) - windows.min(axis=1)
            if np.any(spans == 0.0):
                return True
    return False


def featurize_trial(
    aligned: AlignedTrial,
    cfg: FilterConfig | None = None,
    embodiment: str = "clamp_device",
) -> FeaturizedTrial:
    """Condition, detect contact, and assemble the feature tensor.

    Raises NoContactError when neither cup sees contact.
    """
    cfg = cfg or FilterConfig()
    n = aligned.t_ms.size
    if n < 2:
        raise ValueError("aligned trial too short")
    parallel_jaw = is_parallel_jaw(embodiment)

    force_ma = causal_moving_average(aligned.force_v, cfg.moving_avg_window)
    d_force = diff_feature(force_ma)
    vibration = (
        condition_mic(aligned.mic_v, n) if aligned.mic_v.size else np.zeros(n)
    )

    if parallel_jaw:
        active_s = np.zeros(n)
        passive_s = np.zeros(n)
        d_active = np.zeros(n)
        d_passive = np.zeros(n)
        prop = condition_linear_acceleration(
            relative_linear_acceleration(aligned.imu1[:, 0:3], aligned.imu2[:, 0:3]),
            cfg,
        )
        imped = impedance_linear(d_force, prop)
        left: tuple[tuple[int, int], ...] = ()
        initial_active_c = None
        thermal_fault = False
    else:
        active_s = butterworth_lowpass(aligned.active_c, cfg)
        passive_s = butterworth_lowpass(aligned.passive_c, cfg)
        d_active = diff_feature(active_s)
        d_passive = diff_feature(passive_s)
        prop = relative_angular_velocity(aligned.imu1[:, 3:6], aligned.imu2[:, 3:6])
        imped = impedance(d_force, prop)
        left = detect_contact_left(active_s)
        initial_active_c = float(active_s[0])
        thermal_fault = _thermal_fault(active_s, passive_s)

    # Contact timing reads the raw aligned force so the moving-average
    # tail cannot smear the release edge.
    right = detect_contact_right(aligned.force_v)
    events = ContactEvents.from_detections(left, right)
    channels = {
        "active_c": active_s,
        "passive_c": passive_s,
        "force_v": force_ma,
        "vibration": vibration,
        "proprioception": prop,
        "d_active": d_active,
        "d_passive": d_passive,
        "d_force": d_force,
        "impedance": imped,
    }
    tensor = segment_and_pad(channels, events, embodiment)
    start, end = events.segment
    qc = TrialQC(
        initial_force_v=float(aligned.force_v[0]),
        initial_active_c=initial_active_c,
        thermal_fault=thermal_fault,
        max_abs_prop=float(np.abs(prop[start:end]).max()),
        gap_fraction=dict(aligned.gap_fraction),
    )
    return FeaturizedTrial(
        object_id=aligned.object_id,
        trial_index=aligned.trial_index,
        tensor=tensor,
        events=events,
        qc=qc,
    )


# --------------------------------------------------------------------------
# Dataset filter


@dataclass(frozen=True)
class ExclusionReport:
    object_id: str
    trial_index: int
    retained: bool
    rules_fired: frozenset[str]

    def __post_init__(self) -> None:
        if self.retained != (not self.rules_fired):
            raise ValueError("retained must mean no rules fired")
        unknown = self.rules_fired - set(EXCLUSION_RULES)
        if unknown:
            raise ValueError(f"unknown exclusion rules: {sorted(unknown)}")


def filter_dataset(
    trials: Sequence[FeaturizedTrial],
) -> tuple[list[FeaturizedTrial], list[ExclusionReport]]:
    """Apply the six exclusion rules; order-preserving and per-trial pure."""
    retained: list[FeaturizedTrial] = []
    reports: list[ExclusionReport] = []
    for trial in trials:
        if trial.labels is None:
            raise ValueError(
                f"trial {trial.object_id}/{trial.trial_index} has no labels"
            )
        fired: set[str] = set()
        if trial.labels.material in SMALL_CLASSES:
            fired.add("small_class")
        if trial.qc.initial_force_v > FORCE_CONTACT_V:
            fired.add("initial_force")
        if (
            trial.qc.initial_active_c is not None
            and trial.qc.initial_active_c < INITIAL_TEMP_MIN_C
        ):
            fired.add("initial_temp")
        if trial.qc.thermal_fault:
            fired.add("sensor_fault")
        if (
            not is_parallel_jaw(trial.tensor.embodiment)
            and trial.qc.max_abs_prop < SLOW_GRASP_MIN_DPS
        ):
            fired.add("slow_grasp")
        if trial.labels.heterogeneous_surfaces:
            fired.add("heterogeneous")
        report = ExclusionReport(
            object_id=trial.object_id,
            trial_index=trial.trial_index,
            retained=not fired,
            rules_fired=frozenset(fired),
        )
        reports.append(report)
        if report.retained:
            retained.append(trial)
    return retained, reports


# --------------------------------------------------------------------------
# Serialization

_TENSOR_MAGIC = b"CLFT"
_TENSOR_VERSION = 1


def save_tensor(path: str | Path, tensor: FeatureTensor) -> None:
    """Binary container: magic, version, embodiment, valid_len, LE f32 data."""
    tensor.validate()
    emb = tensor.embodiment.encode("ascii")
    header = struct.pack("<4sBB", _TENSOR_MAGIC, _TENSOR_VERSION, len(emb))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(emb)
        fh.write(struct.pack("<H", tensor.valid_len))
        fh.write(np.ascontiguousarray(tensor.channels, dtype="<f4").tobytes())


def load_tensor(path: str | Path) -> FeatureTensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:4] != _TENSOR_MAGIC:
        raise ValueError(f"{path}: not a feature-tensor file")
    version, emb_len = struct.unpack("<BB", blob[4:6])
    if version != _TENSOR_VERSION:
        raise ValueError(f"{path}: unsupported tensor version {version}")
    offset = 6
    embodiment = blob[offset : offset + emb_len].decode("ascii")
    offset += emb_len
    (valid_len,) = struct.unpack("<H", blob[offset : offset + 2])
    offset += 2
    expected = len(CHANNEL_NAMES) * TENSOR_LEN * 4
    payload = blob[offset : offset + expected]
    if len(payload) != expected:
        raise ValueError(f"{path}: truncated tensor payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(len(CHANNEL_NAMES), TENSOR_LEN)
    tensor = FeatureTensor(
        channels=data.copy(), embodiment=embodiment, valid_len=int(valid_len)
    )
    tensor.validate()
    return tensor


def tensor_to_csv(path: str | Path, tensor: FeatureTensor) -> None:
    """Debug export: one row per timestep, one column per channel."""
    tensor.validate()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CHANNEL_NAMES)
        for t in range(TENSOR_LEN):
            writer.writerow(format(x, ".9g") for x in tensor.channels[:, t])


# Which tensor channels carry each raw sense, counting derived channels
# with their source: impedance is force over motion, so it belongs to
# both the force and proprioception groups.
MODALITY_CHANNELS: Mapping[str, tuple[str, ...]] = {
    "active_thermal": ("active_c", "d_active"),
    "passive_thermal": ("passive_c", "d_passive"),
    "force": ("force_v", "d_force", "impedance"),
    "vibration": ("vibration",),
    "proprioception": ("proprioception", "impedance"),
}


def zero_modality(x: np.ndarray, modality: str) -> np.ndarray:
    """Copy of a (..., 9, T) tensor stack with one sense blanked out."""
    if modality not in MODALITY_CHANNELS:
        raise ValueError(
            f"unknown modality {modality!r}; expected one of "
            f"{sorted(MODALITY_CHANNELS)}"
        )
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-2] != len(CHANNEL_NAMES):
        raise ValueError(f"expected (..., {len(CHANNEL_NAMES)}, T), got {x.shape}")
    out = x.copy()
    for name in MODALITY_CHANNELS[modality]:
        out[..., CHANNEL_NAMES.index(name), :] = 0.0
    return out
