"""Synthetic grasp-trial oracle.

Generates physically plausible multirate sensor traces for a grasped
object: a heated thermistor that cools on contact at a rate set by the
material's thermal effusivity, an unheated thermistor drifting toward
the object's surface temperature, an FSR voltage rising at a rate set by
compliance, a contact mic carrying texture-scaled band noise, and two
IMUs whose relative motion encodes the finger trajectory. All randomness
comes from counter-based generators keyed by (seed, stream), so traces
are byte-identical for equal inputs and adding streams never perturbs
existing ones.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from types import MappingProxyType
from typing import Sequence

import numpy as np
from scipy import signal as _scipy_signal

from .ingest import (
    SCHEMA_VERSION,
    ThermistorConfig,
    TrialRecord,
    celsius_to_thermistor_voltage,
    write_json,
    write_trial_csv,
)
from .materials import (
    COMPLIANCE_LABELS,
    EMBODIMENTS,
    MATERIAL_LABELS,
    canonical_label,
    compliance_of,
    is_parallel_jaw,
)

SAMPLE_RATE_HZ = 50.0
MIC_RATE_HZ = 100.0
SETPOINT_C = 55.0

RIPPLE_AMPLITUDE_C = 0.2
RIPPLE_PERIOD_S = 5.0
CONTACT_TAU_BASE_S = 1.0
REHEAT_TAU_S = 1.0
FORCE_TAU_BASE_S = 0.35
PASSIVE_CONTACT_TAU_S = 2.0
PASSIVE_RELEASE_TAU_S = 3.0

# Per-stream additive noise levels. Thermal noise is applied in the
# temperature domain before the divider conversion; 5e-4 C keeps the
# contact-detection thresholds many sigma away from false triggers.
NOISE_SIGMA = MappingProxyType(
    {
        "active_c": 5e-4,
        "passive_c": 5e-4,
        "force_v": 5e-4,
        "mic_v": 1e-3,
        "gyro_dps": 0.02,
        "accel_g": 0.002,
    }
)

# Stream ids for the counter-based noise generators.
_STREAMS = MappingProxyType(
    {
        "active": 0,
        "passive": 1,
        "force": 2,
        "mic": 3,
        "imu1": 4,
        "imu2": 5,
    }
)

# Parallel-jaw proprioception artifacts the conditioning stack removes.
PJ_DRIFT_G_PER_S = 0.02
PJ_OFFSET_G = 0.5


@dataclass(frozen=True)
class MaterialArchetype:
    """Generative parameters for one material class."""

    name: str
    effusivity_factor: float
    compliance_factor: float
    texture_energy: float
    ambient_temp_c: float = 24.0

    def __post_init__(self) -> None:
        if self.name not in MATERIAL_LABELS:
            raise ValueError(
                f"unknown material {self.name!r}; expected one of: "
                + ", ".join(MATERIAL_LABELS)
            )
        if not 0.0 < self.effusivity_factor <= 1.0:
            raise ValueError("effusivity_factor must lie in (0, 1]")
        if not 0.0 < self.compliance_factor <= 1.0:
            raise ValueError("compliance_factor must lie in (0, 1]")
        if self.texture_energy < 0.0:
            raise ValueError("texture_energy must be >= 0")
        if not -10.0 < self.ambient_temp_c < SETPOINT_C:
            raise ValueError("ambient_temp_c must lie in (-10, 55)")


@dataclass(frozen=True)
class GraspParams:
    """One grasp's trajectory parameters."""

    approach_speed: float = 25.0
    peak_force_v: float = 1.1
    contact_onset_s: float = 2.0
    contact_duration_s: float = 5.0
    trial_duration_s: float = 10.0

    def __post_init__(self) -> None:
        if self.approach_speed <= 0:
            raise ValueError("approach_speed must be > 0")
        if not 0.0 <= self.peak_force_v <= 3.3:
            raise ValueError("peak_force_v must lie in [0, 3.3]")
        if self.contact_onset_s < 0 or self.contact_duration_s < 0:
            raise ValueError("contact timing must be >= 0")
        if self.trial_duration_s <= 0:
            raise ValueError("trial_duration_s must be > 0")
        if self.contact_onset_s + self.contact_duration_s > self.trial_duration_s:
            raise ValueError(
                "contact_onset_s + contact_duration_s must be <= trial_duration_s"
            )


@dataclass(frozen=True)
class SessionSpec:
    """Everything needed to generate one object's session."""

    object_id: str
    archetype: MaterialArchetype
    grasp: GraspParams | tuple[GraspParams, ...]
    n_trials: int = 5
    heterogeneous_surfaces: bool = False
    compliance_label: str = "hard"
    seed: int = 0
    embodiment: str = "clamp_device"

    def __post_init__(self) -> None:
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        if self.compliance_label not in COMPLIANCE_LABELS:
            raise ValueError(f"unknown compliance label {self.compliance_label!r}")
        if self.embodiment not in EMBODIMENTS:
            raise ValueError(f"unknown embodiment {self.embodiment!r}")
        if isinstance(self.grasp, tuple) and len(self.grasp) != self.n_trials:
            raise ValueError("per-trial grasp list must have n_trials entries")

    def grasp_for(self, trial_index: int) -> GraspParams:
        if isinstance(self.grasp, tuple):
            return self.grasp[trial_index - 1]
        return self.grasp


ARCHETYPE_PRESETS: MappingProxyType = MappingProxyType(
    {
        "steel": MaterialArchetype("steel", 1.00, 1.00, 0.55),
        "aluminium": MaterialArchetype("aluminium", 0.80, 1.00, 0.45),
        "glass": MaterialArchetype("glass", 0.50, 0.95, 0.22),
        "hard_plastic": MaterialArchetype("hard_plastic", 0.44, 0.62, 0.28),
        "fabric": MaterialArchetype("fabric", 0.20, 0.30, 0.75),
        "foam": MaterialArchetype("foam", 0.10, 0.18, 0.60),
    }
)

# Labels without a dedicated preset borrow the closest one.
_NEAREST_PRESET = MappingProxyType(
    {
        "brass": "aluminium",
        "cardboard": "fabric",
        "dry_wall": "hard_plastic",
        "granite": "glass",
        "paper": "fabric",
        "porcelain": "glass",
        "rubber": "foam",
        "soft_plastic": "hard_plastic",
        "steel": "steel",
        "aluminium": "aluminium",
        "glass": "glass",
        "hard_plastic": "hard_plastic",
        "fabric": "fabric",
        "foam": "foam",
        "vegetable_matter": "foam",
        "wood": "hard_plastic",
    }
)


def archetype_for_label(label: str, ambient_temp_c: float = 24.0) -> MaterialArchetype:
    """Archetype for any of the 16 labels (nearest preset parameters)."""
    name = canonical_label(label)
    if name not in MATERIAL_LABELS:
        raise ValueError(
            f"unknown material {label!r}; expected one of: " + ", ".join(MATERIAL_LABELS)
        )
    preset = ARCHETYPE_PRESETS[_NEAREST_PRESET[name]]
    return replace(preset, name=name, ambient_temp_c=ambient_temp_c)


def thermal_response(
    effusivity_factor: float, t_since_contact, ambient_temp_c: float = 24.0
):
    """Active-sensor temperature after contact, first-order decay.

    The sensor falls from the 55 C setpoint toward a material-dependent
    floor; higher effusivity means both a lower floor and a faster fall.
    Monotone non-increasing in time.
    """
    if not 0.0 < effusivity_factor <= 1.0:
        raise ValueError("effusivity_factor must lie in (0, 1]")
    t = np.asarray(t_since_contact, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("t_since_contact must be >= 0")
    target = SETPOINT_C - (SETPOINT_C - ambient_temp_c) * effusivity_factor
    tau = CONTACT_TAU_BASE_S / (0.25 + 0.75 * effusivity_factor)
    out = target + (SETPOINT_C - target) * np.exp(-t / tau)
    return float(out) if np.isscalar(t_since_contact) else out


def _stream_rng(seed: int, stream: int) -> np.random.Generator:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stream)])
    return np.random.Generator(np.random.Philox(key=key))


def _ripple(t_s: np.ndarray) -> np.ndarray:
    """On-off controller ripple: triangular, +-0.2 C, 5 s period."""
    return RIPPLE_AMPLITUDE_C * _scipy_signal.sawtooth(
        2.0 * np.pi * t_s / RIPPLE_PERIOD_S, width=0.5
    )


def contact_truth(grasp: GraspParams) -> tuple[int, int] | None:
    """Ground-truth grid indices of mechanical contact [onset, release).

    None when the grasp never makes contact.
    """
    if grasp.contact_duration_s <= 0 or grasp.peak_force_v <= 0.01:
        return None
    onset = int(round(grasp.contact_onset_s * SAMPLE_RATE_HZ))
    release = onset + int(round(grasp.contact_duration_s * SAMPLE_RATE_HZ))
    return onset, release


def _trapezoid(
    t_s: np.ndarray, start: float, rise: float, hold_until: float, fall: float, level: float
) -> np.ndarray:
    """Velocity trapezoid: ramp up over `rise`, hold, ramp down over `fall`."""
    up = np.clip((t_s - start) / max(rise, 1e-9), 0.0, 1.0)
    down = np.clip((t_s - hold_until) / max(fall, 1e-9), 0.0, 1.0)
    return level * (up - down)


def _finger_rate_profile(grasp: GraspParams, t_s: np.ndarray) -> np.ndarray:
    """Closing/holding/opening angular-rate profile of the moving finger."""
    truth = contact_truth(grasp)
    onset_s = grasp.contact_onset_s
    profile = _trapezoid(
        t_s,
        start=max(0.0, onset_s - 0.5),
        rise=0.15,
        hold_until=onset_s,
        fall=0.06,
        level=grasp.approach_speed,
    )
    if truth is not None:
        release_s = onset_s + grasp.contact_duration_s
        profile += _trapezoid(
            t_s,
            start=release_s,
            rise=0.10,
            hold_until=release_s + 0.4,
            fall=0.15,
            level=-0.8 * grasp.approach_speed,
        )
    return profile


def _prismatic_accel_profile(grasp: GraspParams, t_s: np.ndarray) -> np.ndarray:
    """Parallel-jaw closing acceleration: paired accel/decel pulses."""
    scale = 0.3 * grasp.approach_speed / 25.0
    onset_s = grasp.contact_onset_s
    out = np.zeros_like(t_s)

    def pulse(center: float, amp: float, width: float = 0.08) -> np.ndarray:
        return amp * np.exp(-0.5 * ((t_s - center) / width) ** 2)

    out += pulse(max(0.0, onset_s - 0.5), scale)
    out += pulse(onset_s, -scale)
    truth = contact_truth(grasp)
    if truth is not None:
        release_s = onset_s + grasp.contact_duration_s
        out += pulse(release_s, -scale * 0.8)
        out += pulse(release_s + 0.4, scale * 0.8)
    return out


def generate_trial(
    archetype: MaterialArchetype,
    grasp: GraspParams,
    seed: int,
    embodiment: str = "clamp_device",
) -> TrialRecord:
    """Generate one trial's raw streams (volts / g / deg/s)."""
    parallel_jaw = is_parallel_jaw(embodiment)
    n = int(round(grasp.trial_duration_s * SAMPLE_RATE_HZ))
    if n < 2:
        raise ValueError("trial too short for the 50 Hz grid")
    t_s = np.arange(n, dtype=np.float64) / SAMPLE_RATE_HZ
    t_ms = t_s * 1000.0
    truth = contact_truth(grasp)
    onset = release = None
    if truth is not None:
        onset, release = truth
        onset = min(onset, n - 1)
        release = min(release, n)
    in_contact = np.zeros(n, dtype=bool)
    if onset is not None:
        in_contact[onset:release] = True

    ambient = archetype.ambient_temp_c

    # Active thermal: setpoint + controller ripple when idle, first-order
    # contact decay, first-order reheat with the ripple ramping back in.
    active = SETPOINT_C + _ripple(t_s)
    if onset is not None and not parallel_jaw:
        dt = t_s[onset:release] - t_s[onset]
        t_on = active[onset]
        target = SETPOINT_C - (SETPOINT_C - ambient) * archetype.effusivity_factor
        tau = CONTACT_TAU_BASE_S / (0.25 + 0.75 * archetype.effusivity_factor)
        active[onset:release] = target + (t_on - target) * np.exp(-dt / tau)
        if release < n:
            dt_r = t_s[release:] - t_s[release]
            t_rel = target + (t_on - target) * np.exp(
                -(t_s[release] - t_s[onset]) / tau
            )
            reheat = SETPOINT_C + (t_rel - SETPOINT_C) * np.exp(-dt_r / REHEAT_TAU_S)
            active[release:] = reheat + _ripple(t_s[release:]) * (
                1.0 - np.exp(-dt_r / REHEAT_TAU_S)
            )
    if parallel_jaw:
        # No heated cup on parallel jaws; the channel reads ambient.
        active = np.full(n, ambient)

    # Passive thermal: drifts toward the object surface temperature on
    # contact, relaxes back to ambient afterwards.
    rng_passive = _stream_rng(seed, _STREAMS["passive"])
    object_temp = ambient + rng_passive.uniform(-1.0, 1.5)
    passive = np.full(n, ambient)
    if onset is not None:
        dt = t_s[onset:release] - t_s[onset]
        target_p = ambient + 0.6 * (object_temp - ambient)
        passive[onset:release] = target_p + (ambient - target_p) * np.exp(
            -dt / PASSIVE_CONTACT_TAU_S
        )
        if release < n:
            p_rel = passive[release - 1]
            dt_r = t_s[release:] - t_s[release]
            passive[release:] = ambient + (p_rel - ambient) * np.exp(
                -dt_r / PASSIVE_RELEASE_TAU_S
            )

    # Force: compliance-limited exponential rise, hard zero on release.
    force = np.zeros(n)
    if onset is not None:
        dt = t_s[onset:release] - t_s[onset]
        tau_f = FORCE_TAU_BASE_S / archetype.compliance_factor
        force[onset:release] = grasp.peak_force_v * (1.0 - np.exp(-dt / tau_f))

    rng_active = _stream_rng(seed, _STREAMS["active"])
    active = active + rng_active.normal(0.0, NOISE_SIGMA["active_c"], n)
    passive = passive + rng_passive.normal(0.0, NOISE_SIGMA["passive_c"], n)
    rng_force = _stream_rng(seed, _STREAMS["force"])
    force = force + rng_force.normal(0.0, NOISE_SIGMA["force_v"], n)

    # Contact mic at 100 Hz: sensor noise plus texture-scaled band noise
    # during contact only, with short onset/release bursts.
    m = 2 * n
    mic_t_s = np.arange(m, dtype=np.float64) / MIC_RATE_HZ
    rng_mic = _stream_rng(seed, _STREAMS["mic"])
    mic = rng_mic.normal(0.0, NOISE_SIGMA["mic_v"], m)
    if onset is not None:
        mic_contact = (mic_t_s >= t_s[onset]) & (
            mic_t_s < (t_s[release - 1] if release <= n else t_s[-1]) + 1e-9
        )
        texture_sigma = 0.05 * archetype.texture_energy
        mic = mic + mic_contact * rng_mic.normal(0.0, 1.0, m) * texture_sigma
        burst = 0.12 * archetype.texture_energy * (grasp.approach_speed / 25.0)
        for t_event in (t_s[onset], t_s[release - 1] if release <= n else None):
            if t_event is None:
                continue
            envelope = burst * np.exp(-np.clip(mic_t_s - t_event, 0.0, None) / 0.05)
            envelope[mic_t_s < t_event] = 0.0
            mic = mic + envelope * rng_mic.normal(0.0, 1.0, m)

    # IMUs. The moving finger's rotation shows up on IMU-2's y axis
    # (mounted so y2 tracks z1); IMU-1 sits on the body and sees gravity
    # plus sensor noise.
    rng_imu1 = _stream_rng(seed, _STREAMS["imu1"])
    rng_imu2 = _stream_rng(seed, _STREAMS["imu2"])
    imu1 = np.empty((n, 6))
    imu1[:, 0] = rng_imu1.normal(0.0, NOISE_SIGMA["accel_g"], n)
    imu1[:, 1] = rng_imu1.normal(0.0, NOISE_SIGMA["accel_g"], n)
    imu1[:, 2] = 1.0 + rng_imu1.normal(0.0, NOISE_SIGMA["accel_g"], n)
    imu1[:, 3:6] = rng_imu1.normal(0.0, NOISE_SIGMA["gyro_dps"], (n, 3))

    imu2 = np.empty((n, 6))
    imu2[:, 0] = rng_imu2.normal(0.0, NOISE_SIGMA["accel_g"], n)
    imu2[:, 2] = rng_imu2.normal(0.0, NOISE_SIGMA["accel_g"], n)
    if parallel_jaw:
        accel_y = (
            _prismatic_accel_profile(grasp, t_s)
            + PJ_DRIFT_G_PER_S * t_s
            + PJ_OFFSET_G
        )
        rate_y = np.zeros(n)
    else:
        rate_y = _finger_rate_profile(grasp, t_s)
        # Rotational transient leaks into the linear channel at cup radius.
        accel_y = np.gradient(rate_y, t_s) * 1.42e-4
    imu2[:, 1] = accel_y + rng_imu2.normal(0.0, NOISE_SIGMA["accel_g"], n)
    imu2[:, 3] = rng_imu2.normal(0.0, NOISE_SIGMA["gyro_dps"], n)
    imu2[:, 4] = rate_y + rng_imu2.normal(0.0, NOISE_SIGMA["gyro_dps"], n)
    imu2[:, 5] = rng_imu2.normal(0.0, NOISE_SIGMA["gyro_dps"], n)

    thermistor = ThermistorConfig()
    return TrialRecord(
        object_id="",
        trial_index=0,
        t_ms=t_ms,
        active_v=celsius_to_thermistor_voltage(active, thermistor),
        passive_v=celsius_to_thermistor_voltage(passive, thermistor),
        force_v=force,
        mic_t_ms=mic_t_s * 1000.0,
        mic_v=mic,
        imu1=imu1,
        imu2=imu2,
    )


def trial_seed(session_seed: int, trial_index: int) -> int:
    """Per-trial seed derived so sessions with nearby seeds stay independent."""
    ss = np.random.SeedSequence(entropy=(session_seed & (2**63 - 1), trial_index))
    return int(ss.generate_state(1, np.uint64)[0])


def generate_session(spec: SessionSpec, root: str | Path) -> Path:
    """Write one object's session directory; returns its path."""
    session_dir = Path(root) / spec.object_id
    session_dir.mkdir(parents=True, exist_ok=True)
    truths: list[list[int] | None] = []
    for k in range(1, spec.n_trials + 1):
        grasp = spec.grasp_for(k)
        rec = generate_trial(
            spec.archetype, grasp, trial_seed(spec.seed, k), spec.embodiment
        )
        rec.object_id = spec.object_id
        rec.trial_index = k
        write_trial_csv(session_dir / f"trial_{k}.csv", rec)
        truth = contact_truth(grasp)
        truths.append(list(truth) if truth is not None else None)

    labels = {
        "material": spec.archetype.name,
        "heterogeneous_surfaces": spec.heterogeneous_surfaces,
        "compliance": spec.compliance_label,
        "embodiment": spec.embodiment,
    }
    write_json(session_dir / "labels.json", labels)
    manifest = {
        "object_id": spec.object_id,
        "labels": labels,
        "n_trials": spec.n_trials,
        "seed": spec.seed,
        "schema_version": SCHEMA_VERSION,
        "embodiment": spec.embodiment,
        "contact_truth": truths,
        "archetype": {
            "name": spec.archetype.name,
            "effusivity_factor": spec.archetype.effusivity_factor,
            "compliance_factor": spec.archetype.compliance_factor,
            "texture_energy": spec.archetype.texture_energy,
            "ambient_temp_c": spec.archetype.ambient_temp_c,
        },
    }
    write_json(session_dir / "manifest.json", manifest)
    return session_dir


def make_benchmark_specs(
    n_objects: int,
    seed: int,
    materials: Sequence[str] | None = None,
    embodiment: str = "clamp_device",
    heterogeneous_fraction: float = 0.0,
    n_trials: int = 5,
    effusivity_jitter: float = 0.12,
    compliance_jitter: float = 0.15,
    texture_jitter: float = 0.20,
) -> list[SessionSpec]:
    """Balanced object specs for the synthetic benchmarks.

    Materials cycle round-robin so classes stay balanced; per-object
    archetype jitter and per-trial grasp jitter provide within-class
    variation. Deterministic in (n_objects, seed, arguments).
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    names = tuple(materials) if materials else tuple(ARCHETYPE_PRESETS)
    rng = _stream_rng(seed, 0xBE5C)
    specs: list[SessionSpec] = []
    for i in range(n_objects):
        name = names[i % len(names)]
        base = archetype_for_label(name)
        archetype = MaterialArchetype(
            name=base.name,
            effusivity_factor=float(
                np.clip(
                    base.effusivity_factor
                    * rng.uniform(1.0 - effusivity_jitter, 1.0 + effusivity_jitter),
                    0.02,
                    1.0,
                )
            ),
            compliance_factor=float(
                np.clip(
                    base.compliance_factor
                    * rng.uniform(1.0 - compliance_jitter, 1.0 + compliance_jitter),
                    0.05,
                    1.0,
                )
            ),
            texture_energy=float(
                base.texture_energy
                * rng.uniform(1.0 - texture_jitter, 1.0 + texture_jitter)
            ),
            ambient_temp_c=float(rng.uniform(22.0, 26.0)),
        )
        grasps = tuple(
            GraspParams(
                approach_speed=float(rng.uniform(8.0, 35.0)),
                peak_force_v=float(rng.uniform(0.9, 1.4)),
                contact_onset_s=float(rng.uniform(1.4, 2.4)),
                contact_duration_s=float(rng.uniform(4.0, 6.0)),
                trial_duration_s=10.0,
            )
            for _ in range(n_trials)
        )
        heterogeneous = bool(rng.random() < heterogeneous_fraction)
        specs.append(
            SessionSpec(
                object_id=f"obj_{i:04d}",
                archetype=archetype,
                grasp=grasps,
                n_trials=n_trials,
                heterogeneous_surfaces=heterogeneous,
                compliance_label=compliance_of(name),
                seed=int(rng.integers(0, 2**63 - 1)),
                embodiment=embodiment,
            )
        )
    return specs
