"""Session loading, multirate stream alignment, and unit conversion.

A session directory holds `manifest.json`, `labels.json`, and one
`trial_<k>.csv` per grasp. Trial CSVs interleave two row kinds under a
single 17-column header: sensor rows at 50 Hz carrying everything except
the mic, and mic-only rows at 100 Hz carrying `t_ms,mic_v`. A bare
directory of trial CSVs with only a `labels.json` sidecar is also
accepted for externally collected data.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .materials import EMBODIMENTS, MATERIAL_LABELS, COMPLIANCE_LABELS

SCHEMA_VERSION = 1
SAMPLE_RATE_HZ = 50.0
MIC_RATE_HZ = 100.0
ALIGN_TOLERANCE_MS = 2.0

TRIAL_CSV_HEADER = (
    "t_ms",
    "active_v",
    "passive_v",
    "force_v",
    "mic_v",
    "imu1_ax",
    "imu1_ay",
    "imu1_az",
    "imu1_gx",
    "imu1_gy",
    "imu1_gz",
    "imu2_ax",
    "imu2_ay",
    "imu2_az",
    "imu2_gx",
    "imu2_gy",
    "imu2_gz",
)

IMU_COLUMNS = ("ax", "ay", "az", "gx", "gy", "gz")


class SessionFormatError(ValueError):
    """Raised when a session directory or trial file violates the layout."""


# --------------------------------------------------------------------------
# Unit conversion


@dataclass(frozen=True)
class ThermistorConfig:
    """Voltage divider + beta-model constants for the thermal sensors.

    The NTC sits on the low side of the divider (reference resistor to
    supply, NTC to ground) and the ADC measures the voltage across the
    NTC, so resistance and voltage rise together and temperature falls
    as voltage rises.
    """

    vcc: float = 3.3
    r_ref_ohm: float = 10_000.0
    r0_ohm: float = 10_000.0
    t0_c: float = 25.0
    beta_k: float = 3450.0

    def __post_init__(self) -> None:
        if min(self.vcc, self.r_ref_ohm, self.r0_ohm, self.beta_k) <= 0:
            raise ValueError("thermistor constants must be positive")


@dataclass(frozen=True)
class FsrCalibration:
    """Exponential force fit F = a * exp(b * v)."""

    a: float
    b: float


def thermistor_voltage_to_celsius(v, cfg: ThermistorConfig = ThermistorConfig()):
    """Convert divider voltage to temperature via the beta model.

    Inverts the divider to NTC resistance R = R_ref * v / (Vcc - v), then
    T = 1/(1/T0 + ln(R/R0)/B) - 273.15. Strictly decreasing in v.
    """
    arr = np.asarray(v, dtype=np.float64)
    if np.any(arr <= 0.0) or np.any(arr >= cfg.vcc):
        bad = arr[(arr <= 0.0) | (arr >= cfg.vcc)]
        raise ValueError(
            f"voltage outside (0, {cfg.vcc}) V: {np.atleast_1d(bad)[0]!r}"
        )
    r = cfg.r_ref_ohm * arr / (cfg.vcc - arr)
    t0_k = cfg.t0_c + 273.15
    t_k = 1.0 / (1.0 / t0_k + np.log(r / cfg.r0_ohm) / cfg.beta_k)
    t_c = t_k - 273.15
    return float(t_c) if np.isscalar(v) else t_c


def celsius_to_thermistor_voltage(t_c, cfg: ThermistorConfig = ThermistorConfig()):
    """Inverse of thermistor_voltage_to_celsius (used by the synthesizer)."""
    arr = np.asarray(t_c, dtype=np.float64)
    t0_k = cfg.t0_c + 273.15
    t_k = arr + 273.15
    if np.any(t_k <= 0):
        raise ValueError("temperature below absolute zero")
    r = cfg.r0_ohm * np.exp(cfg.beta_k * (1.0 / t_k - 1.0 / t0_k))
    v = cfg.vcc * r / (cfg.r_ref_ohm + r)
    return float(v) if np.isscalar(t_c) else v


def fsr_voltage_to_newtons(v, cal: FsrCalibration):
    """Calibrated force F = a * exp(b * v).

    Provided for completeness; the feature pipeline keeps uncalibrated
    volts.
    """
    arr = np.asarray(v, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("FSR voltage must be >= 0")
    f = cal.a * np.exp(cal.b * arr)
    return float(f) if np.isscalar(v) else f


def fit_fsr_calibration(volts: np.ndarray, newtons: np.ndarray) -> FsrCalibration:
    """Least-squares exponential fit on log(F)."""
    v = np.asarray(volts, dtype=np.float64)
    f = np.asarray(newtons, dtype=np.float64)
    if v.shape != f.shape or v.ndim != 1 or v.size < 2:
        raise ValueError("need matching 1-D arrays with at least 2 points")
    if np.any(f <= 0):
        raise ValueError("forces must be positive for a log-domain fit")
    slope, intercept = np.polyfit(v, np.log(f), 1)
    return FsrCalibration(a=float(np.exp(intercept)), b=float(slope))


# --------------------------------------------------------------------------
# Records


@dataclass
class TrialRecord:
    """Raw multirate streams for one grasp of one object.

    Non-mic streams share `t_ms`; the mic has its own 100 Hz clock.
    Thermal and force streams are raw volts; imu arrays are (n, 6) with
    columns ax, ay, az (g) then gx, gy, gz (deg/s).
    """

    object_id: str
    trial_index: int
    t_ms: np.ndarray
    active_v: np.ndarray
    passive_v: np.ndarray
    force_v: np.ndarray
    mic_t_ms: np.ndarray
    mic_v: np.ndarray
    imu1: np.ndarray
    imu2: np.ndarray

    def validate(self) -> None:
        n = self.t_ms.size
        for name in ("active_v", "passive_v", "force_v"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} length does not match timestamps")
        for name in ("imu1", "imu2"):
            if getattr(self, name).shape != (n, 6):
                raise ValueError(f"{name} must have shape (n, 6)")
        if self.mic_t_ms.shape != self.mic_v.shape:
            raise ValueError("mic stream and timestamps differ in length")
        if n > 1 and not np.all(np.diff(self.t_ms) > 0):
            raise ValueError("timestamps not strictly increasing")
        if self.mic_t_ms.size > 1 and not np.all(np.diff(self.mic_t_ms) > 0):
            raise ValueError("mic timestamps not strictly increasing")


@dataclass
class AlignedTrial:
    """Streams resampled onto the nominal 50 Hz grid (mic on 100 Hz).

    Thermal streams are converted to Celsius; force stays in volts.
    gap_fraction reports, per stream group, the fraction of grid slots
    with no raw sample within the 2 ms tolerance (those slots hold the
    previous value).
    """

    object_id: str
    trial_index: int
    t_ms: np.ndarray
    active_c: np.ndarray
    passive_c: np.ndarray
    force_v: np.ndarray
    mic_t_ms: np.ndarray
    mic_v: np.ndarray
    imu1: np.ndarray
    imu2: np.ndarray
    gap_fraction: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class SessionLabels:
    """Ground-truth annotations for one object's session."""

    object_id: str
    material: str
    compliance: str
    heterogeneous_surfaces: bool
    embodiment: str = "clamp_device"
    n_trials: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.material not in MATERIAL_LABELS:
            raise SessionFormatError(
                f"unknown material label {self.material!r}; expected one of: "
                + ", ".join(MATERIAL_LABELS)
            )
        if self.compliance not in COMPLIANCE_LABELS:
            raise SessionFormatError(
                f"unknown compliance label {self.compliance!r}; expected one of: "
                + ", ".join(COMPLIANCE_LABELS)
            )
        if self.embodiment not in EMBODIMENTS:
            raise SessionFormatError(
                f"unknown embodiment {self.embodiment!r}; expected one of: "
                + ", ".join(EMBODIMENTS)
            )


# --------------------------------------------------------------------------
# Serialization


def _format_cell(value: float) -> str:
    f = float(value)
    if f == int(f) and abs(f) < 1e15:
        return str(int(f))
    return repr(f)


def write_trial_csv(path: Path, rec: TrialRecord) -> None:
    """Write one trial in the interleaved session layout.

    Sensor rows carry every column except mic_v; mic rows carry only
    t_ms and mic_v. Rows are sorted by timestamp, sensor first on ties,
    which makes the byte layout a pure function of the record.
    """
    rec.validate()
    rows: list[tuple[float, int, list[str]]] = []
    for i, t in enumerate(rec.t_ms):
        cells = [
            _format_cell(t),
            _format_cell(rec.active_v[i]),
            _format_cell(rec.passive_v[i]),
            _format_cell(rec.force_v[i]),
            "",
        ]
        cells.extend(_format_cell(x) for x in rec.imu1[i])
        cells.extend(_format_cell(x) for x in rec.imu2[i])
        rows.append((float(t), 0, cells))
    for j, t in enumerate(rec.mic_t_ms):
        cells = [_format_cell(t), "", "", "", _format_cell(rec.mic_v[j])] + [""] * 12
        rows.append((float(t), 1, cells))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRIAL_CSV_HEADER)
        for _, _, cells in rows:
            writer.writerow(cells)


def write_json(path: Path, payload: dict) -> None:
    """Canonical JSON dump: sorted keys, 2-space indent, trailing newline."""
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_float(cell: str, path: Path, line_no: int, col: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise SessionFormatError(
            f"{path}:{line_no}: non-numeric value {cell!r} in column {col}"
        ) from None


def read_trial_csv(path: Path, object_id: str, trial_index: int) -> TrialRecord:
    """Parse one interleaved trial CSV; errors carry file and line."""
    sensor_rows: list[list[float]] = []
    mic_rows: list[list[float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SessionFormatError(f"{path}:1: empty trial file") from None
        if tuple(header) != TRIAL_CSV_HEADER:
            raise SessionFormatError(
                f"{path}:1: header mismatch; expected {','.join(TRIAL_CSV_HEADER)}"
            )
        for line_no, cells in enumerate(reader, start=2):
            if len(cells) != len(TRIAL_CSV_HEADER):
                raise SessionFormatError(
                    f"{path}:{line_no}: expected {len(TRIAL_CSV_HEADER)} cells, "
                    f"got {len(cells)}"
                )
            t = _parse_float(cells[0], path, line_no, "t_ms")
            if cells[1] != "":
                row = [t]
                for col_idx in (1, 2, 3):
                    row.append(
                        _parse_float(cells[col_idx], path, line_no, TRIAL_CSV_HEADER[col_idx])
                    )
                for col_idx in range(5, 17):
                    row.append(
                        _parse_float(cells[col_idx], path, line_no, TRIAL_CSV_HEADER[col_idx])
                    )
                sensor_rows.append(row)
            elif cells[4] != "":
                mic_rows.append([t, _parse_float(cells[4], path, line_no, "mic_v")])
            else:
                raise SessionFormatError(
                    f"{path}:{line_no}: row is neither a sensor row nor a mic row"
                )
    if not sensor_rows:
        raise SessionFormatError(f"{path}: no sensor rows")
    sens = np.asarray(sensor_rows, dtype=np.float64)
    mic = np.asarray(mic_rows, dtype=np.float64) if mic_rows else np.empty((0, 2))
    rec = TrialRecord(
        object_id=object_id,
        trial_index=trial_index,
        t_ms=sens[:, 0],
        active_v=sens[:, 1],
        passive_v=sens[:, 2],
        force_v=sens[:, 3],
        mic_t_ms=mic[:, 0],
        mic_v=mic[:, 1],
        imu1=sens[:, 4:10],
        imu2=sens[:, 10:16],
    )
    try:
        rec.validate()
    except ValueError as exc:
        raise SessionFormatError(f"{path}: {exc}") from None
    return rec


def load_session(path: str | Path) -> tuple[list[TrialRecord], SessionLabels]:
    """Load all trials and the label record from a session directory."""
    root = Path(path)
    if not root.is_dir():
        raise SessionFormatError(f"session directory not found: {root}")
    manifest_path = root / "manifest.json"
    labels_path = root / "labels.json"
    if not labels_path.exists():
        raise SessionFormatError(f"missing labels.json in {root}")
    with open(labels_path) as fh:
        raw_labels = json.load(fh)

    trial_paths = sorted(
        root.glob("trial_*.csv"), key=lambda p: int(p.stem.split("_")[1])
    )
    if manifest_path.exists():
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        for key in ("object_id", "labels", "n_trials", "seed", "schema_version"):
            if key not in manifest:
                raise SessionFormatError(f"{manifest_path}: missing key {key!r}")
        if manifest["schema_version"] != SCHEMA_VERSION:
            raise SessionFormatError(
                f"{manifest_path}: schema_version {manifest['schema_version']} "
                f"unsupported (expected {SCHEMA_VERSION})"
            )
        object_id = str(manifest["object_id"])
        n_trials = int(manifest["n_trials"])
        seed = int(manifest["seed"])
        embodiment = str(manifest.get("embodiment", "clamp_device"))
        if len(trial_paths) != n_trials:
            raise SessionFormatError(
                f"{root}: manifest declares {n_trials} trials, found {len(trial_paths)}"
            )
    else:
        # Bare layout: trial CSVs + labels sidecar only.
        if not trial_paths:
            raise SessionFormatError(f"missing manifest.json in {root}")
        object_id = root.name
        n_trials = len(trial_paths)
        seed = 0
        embodiment = str(raw_labels.get("embodiment", "clamp_device"))

    labels = SessionLabels(
        object_id=object_id,
        material=str(raw_labels["material"]),
        compliance=str(raw_labels["compliance"]),
        heterogeneous_surfaces=bool(raw_labels["heterogeneous_surfaces"]),
        embodiment=embodiment,
        n_trials=n_trials,
        seed=seed,
    )
    labels.validate()
    records = [
        read_trial_csv(p, object_id, int(p.stem.split("_")[1])) for p in trial_paths
    ]
    return records, labels


# --------------------------------------------------------------------------
# Alignment


def _nearest_join(
    raw_t: np.ndarray, grid_t: np.ndarray, tolerance_ms: float
) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest raw sample per grid slot + in-tolerance mask."""
    idx = np.searchsorted(raw_t, grid_t)
    left = np.clip(idx - 1, 0, raw_t.size - 1)
    right = np.clip(idx, 0, raw_t.size - 1)
    pick_right = np.abs(raw_t[right] - grid_t) < np.abs(raw_t[left] - grid_t)
    nearest = np.where(pick_right, right, left)
    ok = np.abs(raw_t[nearest] - grid_t) <= tolerance_ms
    return nearest, ok


def _fill_gaps(values: np.ndarray, ok: np.ndarray) -> np.ndarray:
    """Forward-fill slots whose nearest raw sample missed the tolerance."""
    if ok.all():
        return values
    out = values.copy()
    for i in range(1, out.shape[0]):
        if not ok[i]:
            out[i] = out[i - 1]
    return out


def _make_grid(raw_t: np.ndarray, step_ms: float) -> np.ndarray:
    start = round(float(raw_t[0]) / step_ms) * step_ms
    n = max(1, int(round((float(raw_t[-1]) - start) / step_ms)) + 1)
    return start + step_ms * np.arange(n, dtype=np.float64)


def align_streams(
    trial: TrialRecord, thermistor: ThermistorConfig = ThermistorConfig()
) -> AlignedTrial:
    """Nearest-timestamp alignment onto the nominal grids.

    Grid slots with no raw neighbor within 2 ms are gaps: they hold the
    previous slot's value and count into gap_fraction. Thermal volts are
    converted to Celsius after alignment; the mic stays at 100 Hz for
    later decimation.
    """
    trial.validate()
    if trial.t_ms.size == 0:
        raise ValueError("empty sensor streams")
    grid = _make_grid(trial.t_ms, 1000.0 / SAMPLE_RATE_HZ)
    nearest, ok = _nearest_join(trial.t_ms, grid, ALIGN_TOLERANCE_MS)

    def pick(x: np.ndarray) -> np.ndarray:
        return _fill_gaps(np.asarray(x, dtype=np.float64)[nearest], ok)

    if trial.mic_t_ms.size:
        mic_grid = _make_grid(trial.mic_t_ms, 1000.0 / MIC_RATE_HZ)
        mic_nearest, mic_ok = _nearest_join(trial.mic_t_ms, mic_grid, ALIGN_TOLERANCE_MS)
        mic_v = _fill_gaps(trial.mic_v[mic_nearest], mic_ok)
        mic_gap = 1.0 - float(mic_ok.mean())
    else:
        mic_grid = np.empty(0, dtype=np.float64)
        mic_v = np.empty(0, dtype=np.float64)
        mic_gap = 0.0

    return AlignedTrial(
        object_id=trial.object_id,
        trial_index=trial.trial_index,
        t_ms=grid,
        active_c=thermistor_voltage_to_celsius(pick(trial.active_v), thermistor),
        passive_c=thermistor_voltage_to_celsius(pick(trial.passive_v), thermistor),
        force_v=pick(trial.force_v),
        mic_t_ms=mic_grid,
        mic_v=mic_v,
        imu1=np.stack([pick(trial.imu1[:, j]) for j in range(6)], axis=1),
        imu2=np.stack([pick(trial.imu2[:, j]) for j in range(6)], axis=1),
        gap_fraction={"sensors": 1.0 - float(ok.mean()), "mic": mic_gap},
    )
