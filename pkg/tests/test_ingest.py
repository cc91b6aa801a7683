"""Session I/O, unit conversion, and stream-alignment tests.

The thermistor check is dual-route: the divider inversion plus beta
model is recomputed by hand for pinned voltages, and the forward and
inverse conversions are verified to compose to the identity.
"""
from __future__ import annotations

import json
import math

import numpy as np
import pytest

from clamp.ingest import (
    ALIGN_TOLERANCE_MS,
    TRIAL_CSV_HEADER,
    AlignedTrial,
    FsrCalibration,
    SessionFormatError,
    SessionLabels,
    ThermistorConfig,
    TrialRecord,
    align_streams,
    celsius_to_thermistor_voltage,
    fit_fsr_calibration,
    fsr_voltage_to_newtons,
    load_session,
    read_trial_csv,
    thermistor_voltage_to_celsius,
    write_trial_csv,
)
from clamp.synth import GraspParams, SessionSpec, archetype_for_label, generate_session


def beta_model_oracle(v: float, cfg: ThermistorConfig) -> float:
    """Divider inversion + beta model, written out with math.* only."""
    r = cfg.r_ref_ohm * v / (cfg.vcc - v)
    t0_k = cfg.t0_c + 273.15
    inv_t = 1.0 / t0_k + math.log(r / cfg.r0_ohm) / cfg.beta_k
    return 1.0 / inv_t - 273.15


class TestThermistor:
    def test_matches_hand_computed_beta_model(self):
        cfg = ThermistorConfig()
        for v in (0.3, 0.9, 1.65, 2.4, 3.1):
            assert thermistor_voltage_to_celsius(v, cfg) == pytest.approx(
                beta_model_oracle(v, cfg), abs=1e-12
            )

    def test_midpoint_voltage_reads_reference_temperature(self):
        # r_ref == r0, so v = vcc/2 puts the NTC at exactly r0 -> t0_c.
        cfg = ThermistorConfig()
        assert thermistor_voltage_to_celsius(cfg.vcc / 2.0, cfg) == pytest.approx(
            cfg.t0_c, abs=1e-12
        )

    def test_strictly_decreasing_in_voltage(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            v = np.sort(rng.uniform(0.05, 3.25, size=64))
            v = np.unique(v)
            t = thermistor_voltage_to_celsius(v)
            assert np.all(np.diff(t) < 0)

    def test_round_trip_is_identity(self):
        rng = np.random.default_rng(12)
        t_c = rng.uniform(-10.0, 90.0, size=256)
        back = thermistor_voltage_to_celsius(celsius_to_thermistor_voltage(t_c))
        assert np.allclose(back, t_c, atol=1e-9)

    def test_scalar_in_scalar_out(self):
        out = thermistor_voltage_to_celsius(1.65)
        assert isinstance(out, float)

    def test_rejects_voltage_outside_divider_range(self):
        for bad in (0.0, -0.1, 3.3, 4.0):
            with pytest.raises(ValueError):
                thermistor_voltage_to_celsius(bad)

    def test_rejects_nonpositive_constants(self):
        with pytest.raises(ValueError):
            ThermistorConfig(beta_k=0.0)


class TestFsrCalibration:
    def test_fit_recovers_exact_exponential(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            a = rng.uniform(0.1, 5.0)
            b = rng.uniform(0.2, 3.0)
            v = np.linspace(0.0, 3.0, 40)
            f = a * np.exp(b * v)
            cal = fit_fsr_calibration(v, f)
            assert cal.a == pytest.approx(a, rel=1e-9)
            assert cal.b == pytest.approx(b, rel=1e-9)

    def test_forward_model_applies_fit(self):
        cal = FsrCalibration(a=0.5, b=1.25)
        v = np.array([0.0, 1.0, 2.0])
        assert np.allclose(fsr_voltage_to_newtons(v, cal), 0.5 * np.exp(1.25 * v))

    def test_negative_voltage_rejected(self):
        with pytest.raises(ValueError):
            fsr_voltage_to_newtons(-0.5, FsrCalibration(a=1.0, b=1.0))

    def test_fit_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            fit_fsr_calibration(np.array([1.0]), np.array([2.0]))
        with pytest.raises(ValueError):
            fit_fsr_calibration(np.array([0.0, 1.0]), np.array([1.0, -2.0]))


def random_trial_record(seed: int, n: int = 100, n_mic: int = 200) -> TrialRecord:
    rng = np.random.default_rng(seed)
    return TrialRecord(
        object_id=f"obj_{seed:04d}",
        trial_index=1,
        t_ms=20.0 * np.arange(n, dtype=np.float64),
        active_v=rng.uniform(0.5, 3.0, size=n),
        passive_v=rng.uniform(0.5, 3.0, size=n),
        force_v=rng.uniform(0.0, 2.5, size=n),
        mic_t_ms=10.0 * np.arange(n_mic, dtype=np.float64),
        mic_v=rng.normal(0.0, 0.01, size=n_mic),
        imu1=rng.normal(0.0, 1.0, size=(n, 6)),
        imu2=rng.normal(0.0, 1.0, size=(n, 6)),
    )


class TestTrialCsv:
    def test_round_trip_is_bit_exact(self, tmp_path):
        for seed in range(5):
            rec = random_trial_record(seed)
            path = tmp_path / f"trial_{seed}.csv"
            write_trial_csv(path, rec)
            back = read_trial_csv(path, rec.object_id, rec.trial_index)
            for name in ("t_ms", "active_v", "passive_v", "force_v", "mic_t_ms", "mic_v", "imu1", "imu2"):
                assert np.array_equal(getattr(back, name), getattr(rec, name)), name

    def test_writes_are_byte_deterministic(self, tmp_path):
        rec = random_trial_record(7)
        p1 = tmp_path / "a.csv"
        p2 = tmp_path / "b.csv"
        write_trial_csv(p1, rec)
        write_trial_csv(p2, rec)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rows_interleave_by_timestamp(self, tmp_path):
        rec = random_trial_record(3, n=10, n_mic=20)
        path = tmp_path / "t.csv"
        write_trial_csv(path, rec)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(TRIAL_CSV_HEADER)
        stamps = [float(line.split(",")[0]) for line in lines[1:]]
        assert stamps == sorted(stamps)

    def test_header_mismatch_raises(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time,active\n1,2\n")
        with pytest.raises(SessionFormatError, match="header"):
            read_trial_csv(path, "x", 1)

    def test_non_numeric_cell_reports_line(self, tmp_path):
        rec = random_trial_record(4, n=5, n_mic=0)
        path = tmp_path / "t.csv"
        write_trial_csv(path, rec)
        lines = path.read_text().splitlines()
        cells = lines[3].split(",")
        cells[3] = "oops"
        lines[3] = ",".join(cells)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(SessionFormatError, match=":4:"):
            read_trial_csv(path, "x", 1)

    def test_row_with_no_payload_raises(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text(",".join(TRIAL_CSV_HEADER) + "\n" + "0" + "," * 16 + "\n")
        with pytest.raises(SessionFormatError, match="neither"):
            read_trial_csv(path, "x", 1)

    def test_empty_file_raises(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("")
        with pytest.raises(SessionFormatError, match="empty"):
            read_trial_csv(path, "x", 1)

    def test_validate_rejects_shape_mismatch(self):
        rec = random_trial_record(5)
        rec.force_v = rec.force_v[:-1]
        with pytest.raises(ValueError, match="force_v"):
            rec.validate()

    def test_validate_rejects_non_monotone_timestamps(self):
        rec = random_trial_record(6)
        rec.t_ms[10] = rec.t_ms[9]
        with pytest.raises(ValueError, match="increasing"):
            rec.validate()


class TestAlignment:
    def test_clean_grid_passes_through(self):
        rec = random_trial_record(20)
        out = align_streams(rec)
        assert np.array_equal(out.t_ms, rec.t_ms)
        assert np.array_equal(out.force_v, rec.force_v)
        assert np.allclose(out.active_c, thermistor_voltage_to_celsius(rec.active_v))
        assert np.allclose(out.passive_c, thermistor_voltage_to_celsius(rec.passive_v))
        assert np.array_equal(out.imu1, rec.imu1)
        assert np.array_equal(out.mic_v, rec.mic_v)
        assert out.gap_fraction == {"sensors": 0.0, "mic": 0.0}

    def test_jitter_within_tolerance_picks_nearest(self):
        rng = np.random.default_rng(21)
        rec = random_trial_record(22)
        jitter = rng.uniform(-1.5, 1.5, size=rec.t_ms.size)
        jitter[0] = abs(jitter[0])
        rec.t_ms = rec.t_ms + jitter
        out = align_streams(rec)
        # Every slot has a raw sample within tolerance, so no gaps and the
        # nearest-neighbor pick reproduces the raw values in order.
        assert out.gap_fraction["sensors"] == 0.0
        assert np.array_equal(out.force_v, rec.force_v)

    def test_dropped_sample_forward_fills_and_counts_gap(self):
        rec = random_trial_record(23)
        keep = np.ones(rec.t_ms.size, dtype=bool)
        keep[40] = False
        dropped = TrialRecord(
            object_id=rec.object_id,
            trial_index=rec.trial_index,
            t_ms=rec.t_ms[keep],
            active_v=rec.active_v[keep],
            passive_v=rec.passive_v[keep],
            force_v=rec.force_v[keep],
            mic_t_ms=rec.mic_t_ms,
            mic_v=rec.mic_v,
            imu1=rec.imu1[keep],
            imu2=rec.imu2[keep],
        )
        out = align_streams(dropped)
        assert out.t_ms.size == rec.t_ms.size
        assert out.gap_fraction["sensors"] == pytest.approx(1.0 / rec.t_ms.size)
        assert out.force_v[40] == out.force_v[39]

    def test_no_mic_stream_is_tolerated(self):
        rec = random_trial_record(24, n_mic=0)
        out = align_streams(rec)
        assert out.mic_v.size == 0
        assert out.gap_fraction["mic"] == 0.0

    def test_tolerance_boundary_is_inclusive(self):
        rec = random_trial_record(25, n=50)
        rec.t_ms = rec.t_ms + ALIGN_TOLERANCE_MS
        rec.t_ms[0] = 0.0
        out = align_streams(rec)
        assert out.gap_fraction["sensors"] == 0.0


class TestSessionLoading:
    def make_session(self, tmp_path, **kw):
        spec = SessionSpec(
            object_id=kw.pop("object_id", "obj_0001"),
            archetype=archetype_for_label(kw.pop("material", "steel")),
            grasp=GraspParams(),
            n_trials=kw.pop("n_trials", 2),
            seed=kw.pop("seed", 9),
            **kw,
        )
        return generate_session(spec, tmp_path)

    def test_round_trip_labels_and_trials(self, tmp_path):
        root = self.make_session(tmp_path)
        records, labels = load_session(root)
        assert labels.object_id == "obj_0001"
        assert labels.material == "steel"
        assert labels.compliance == "hard"
        assert labels.n_trials == 2
        assert len(records) == 2
        assert [r.trial_index for r in records] == [1, 2]
        for rec in records:
            rec.validate()

    def test_bare_layout_without_manifest(self, tmp_path):
        root = self.make_session(tmp_path, object_id="bare_obj")
        (root / "manifest.json").unlink()
        records, labels = load_session(root)
        assert labels.object_id == root.name
        assert len(records) == 2

    def test_missing_labels_raises(self, tmp_path):
        root = self.make_session(tmp_path)
        (root / "labels.json").unlink()
        with pytest.raises(SessionFormatError, match="labels.json"):
            load_session(root)

    def test_trial_count_mismatch_raises(self, tmp_path):
        root = self.make_session(tmp_path)
        (root / "trial_2.csv").unlink()
        with pytest.raises(SessionFormatError, match="trials"):
            load_session(root)

    def test_unknown_material_raises(self, tmp_path):
        root = self.make_session(tmp_path)
        labels = json.loads((root / "labels.json").read_text())
        labels["material"] = "unobtainium"
        (root / "labels.json").write_text(json.dumps(labels))
        with pytest.raises(SessionFormatError, match="unobtainium"):
            load_session(root)

    def test_missing_directory_raises(self, tmp_path):
        with pytest.raises(SessionFormatError, match="not found"):
            load_session(tmp_path / "nope")

    def test_label_validation_lists_vocabulary(self):
        labels = SessionLabels(
            object_id="x",
            material="steel",
            compliance="squishy",
            heterogeneous_surfaces=False,
        )
        with pytest.raises(SessionFormatError, match="hard"):
            labels.validate()
