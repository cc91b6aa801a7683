"""Release gate: thirteen end-to-end checks, one test per criterion.

Heavy fixtures (synthetic benchmarks, trained models) are module-scoped
and shared across criteria; every tolerance is pinned in the assertion
itself. Oracles are reimplemented here from definitions, independent of
the library code under test.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import time

import numpy as np
import pytest

from clamp.cli import dispatch
from clamp.features import (
    ContactEvents,
    FeaturizedTrial,
    FeatureTensor,
    NoContactError,
    TrialQC,
    ExclusionReport,
    featurize_trial,
    filter_dataset,
    impedance,
    load_tensor,
    save_tensor,
    segment_and_pad,
    zero_modality,
)
from clamp.filters import FilterConfig
from clamp.fusion import (
    FusionConfig,
    FusionParams,
    MockVisionProvider,
    UNCERTAINTY_PRESETS,
    composite_loss_batch,
    finetune_fusion,
    fused_predictions,
    make_mock_prior_table,
    pretrain_fusion,
    priors_for_objects,
    tiny_fusion_config,
    uncertainty_filter,
    uniform_prior,
)
from clamp.ingest import SessionLabels, align_streams
from clamp.materials import (
    COMPLIANCE_INDEX,
    TRAIN_LABELS,
    TRAIN_LABEL_INDEX,
    compliance_of,
)
from clamp.models.encoder import (
    ArrayDataset,
    HapticEncoder,
    compute_class_weights,
    encoder_hash,
    fit_compliance_head,
    predict_logits,
    stratified_object_split,
    tiny_config,
    train_encoder,
)
from clamp.models.forest import ForestConfig, RandomForest, summary_matrix
from clamp.models.metrics import mcc_from_confusion, normalized_mcc
from clamp.models.nn import finite_difference_check, softmax
from clamp.synth import (
    GraspParams,
    archetype_for_label,
    contact_truth,
    generate_trial,
    make_benchmark_specs,
    trial_seed,
)

SIX_PRESETS = ("steel", "aluminium", "glass", "hard_plastic", "fabric", "foam")


# --------------------------------------------------------------------------
# Shared benchmark builders


def build_benchmark(n_objects, seed, materials, embodiment="clamp_device"):
    """Generate, featurize, and filter one synthetic benchmark in memory."""
    specs = make_benchmark_specs(
        n_objects, seed, materials=list(materials), embodiment=embodiment
    )
    fc = FilterConfig()
    featurized = []
    for s in specs:
        for k in range(1, s.n_trials + 1):
            rec = generate_trial(
                s.archetype, s.grasp_for(k), trial_seed(s.seed, k), s.embodiment
            )
            rec.object_id = s.object_id
            rec.trial_index = k
            trial = featurize_trial(
                align_streams(rec), fc, embodiment=s.embodiment
            )
            trial.labels = SessionLabels(
                object_id=s.object_id,
                material=s.archetype.name,
                compliance=s.compliance_label,
                embodiment=s.embodiment,
                heterogeneous_surfaces=s.heterogeneous_surfaces,
            )
            featurized.append(trial)
    retained, _ = filter_dataset(featurized)
    xs = np.stack([t.tensor.channels for t in retained])
    ys = np.array([TRAIN_LABEL_INDEX[t.labels.material] for t in retained])
    oids = tuple(t.object_id for t in retained)
    return {
        "dataset": ArrayDataset(xs, ys, oids),
        "tensors": [t.tensor for t in retained],
        "compliance": np.array(
            [COMPLIANCE_INDEX[t.labels.compliance] for t in retained]
        ),
        "materials": {t.object_id: t.labels.material for t in retained},
    }


def accuracy(y_true, y_pred) -> float:
    return float((np.asarray(y_true) == np.asarray(y_pred)).mean())


@pytest.fixture(scope="module")
def bench_a():
    """600 objects x 5 trials over the six presets."""
    b = build_benchmark(600, 101, SIX_PRESETS)
    ds = b["dataset"]
    b["split"] = stratified_object_split(ds.object_ids, ds.y, seed=0)
    return b


@pytest.fixture(scope="module")
def encoder_a(bench_a):
    """Encoder trained once on the benchmark's train split, wall-timed."""
    ds = bench_a["dataset"]
    tr, va, te = bench_a["split"]
    t0 = time.perf_counter()
    result = train_encoder(ds.subset(tr), ds.subset(va), tiny_config(seed=0))
    wall = time.perf_counter() - t0
    logits = predict_logits(result.model, ds.x[te])
    return {
        "model": result.model,
        "wall_s": wall,
        "test_logits": logits,
        "test_accuracy": accuracy(ds.y[te], logits.argmax(axis=1)),
    }


@pytest.fixture(scope="module")
def fusion_a(bench_a, encoder_a):
    """Uniform-prior fusion stage trained on the same train split."""
    ds = bench_a["dataset"]
    tr, _, _ = bench_a["split"]
    priors = {oid: uniform_prior() for oid in set(ds.object_ids)}
    enc = encoder_a["model"]
    result = pretrain_fusion(
        ds.subset(tr), enc, priors, tiny_fusion_config(seed=0),
        haptic_logits=predict_logits(enc, ds.x[tr]),
    )
    return {"params": result.params, "priors": priors}


# --------------------------------------------------------------------------
# 1. Impedance formula over random pairs, exact and fast


def test_c01_impedance_formula_exact_and_fast():
    rng = np.random.default_rng(1001)
    n = 100_000
    omega = rng.uniform(-10.0, 10.0, n)
    force_diff = rng.uniform(-1.0, 1.0, n)
    omega[:50] = 3.0  # inclusive boundary
    omega[50:100] = np.nextafter(3.0, 0.0)  # just below the floor
    omega[100:150] = 0.0
    omega[150:200] = -7.5  # large negative rates stay gated

    t0 = time.perf_counter()
    z = impedance(force_diff, omega)
    elapsed = time.perf_counter() - t0

    expected = np.array(
        [f / w if w >= 3.0 else 0.0 for f, w in zip(force_diff, omega)]
    )
    assert np.array_equal(z, expected)  # exact, not approximate
    assert elapsed < 1.0


# --------------------------------------------------------------------------
# 2. Contact detection vs generator ground truth


def test_c02_contact_detection_within_two_samples():
    rng = np.random.default_rng(1002)
    fc = FilterConfig()
    worst = 0
    for i in range(500):
        arch = archetype_for_label(SIX_PRESETS[i % len(SIX_PRESETS)])
        grasp = GraspParams(
            approach_speed=25.0,
            peak_force_v=float(rng.uniform(0.9, 1.4)),
            contact_onset_s=float(rng.uniform(1.5, 2.5)),
            contact_duration_s=float(rng.uniform(4.5, 6.0)),
            trial_duration_s=10.0,
        )
        truth = contact_truth(grasp)
        assert truth is not None
        rec = generate_trial(arch, grasp, int(rng.integers(0, 2**63 - 1)))
        trial = featurize_trial(align_streams(rec), fc)
        start, end = trial.events.segment
        worst = max(worst, abs(start - truth[0]), abs(end - truth[1]))
    assert worst <= 2

    false_events = 0
    quiet = GraspParams(contact_duration_s=0.0)
    for i in range(100):
        rec = generate_trial(
            archetype_for_label(SIX_PRESETS[i % len(SIX_PRESETS)]),
            quiet,
            int(rng.integers(0, 2**63 - 1)),
        )
        try:
            featurize_trial(align_streams(rec), fc)
            false_events += 1
        except NoContactError:
            pass
    assert false_events == 0


# --------------------------------------------------------------------------
# 3. Exclusion rules on a constructed 13-trial suite


def crafted_trial(
    object_id,
    trial_index,
    material="steel",
    heterogeneous=False,
    initial_force_v=0.0,
    initial_active_c=55.0,
    thermal_fault=False,
    max_abs_prop=20.0,
):
    data = np.zeros((9, 491), dtype=np.float32)
    tensor = FeatureTensor(channels=data, embodiment="clamp_device",
                           valid_len=100)
    events = ContactEvents(left=((0, 100),), right=((0, 100),),
                           segment=(0, 100))
    qc = TrialQC(
        initial_force_v=initial_force_v,
        initial_active_c=initial_active_c,
        thermal_fault=thermal_fault,
        max_abs_prop=max_abs_prop,
        gap_fraction={"sensors": 0.0, "mic": 0.0},
    )
    labels = SessionLabels(
        object_id=object_id,
        material=material,
        compliance=compliance_of(material),
        heterogeneous_surfaces=heterogeneous,
        embodiment="clamp_device",
    )
    return FeaturizedTrial(
        object_id=object_id, trial_index=trial_index, tensor=tensor,
        events=events, qc=qc, labels=labels,
    )


def test_c03_exclusion_rule_suite_exact_reports():
    suite = [
        ("keep", crafted_trial("keep", 1), frozenset()),
        ("cls_a", crafted_trial("cls_a", 1, material="dry_wall"),
         frozenset({"small_class"})),
        ("cls_b", crafted_trial("cls_b", 1, material="granite"),
         frozenset({"small_class"})),
        ("frc_a", crafted_trial("frc_a", 1, initial_force_v=0.011),
         frozenset({"initial_force"})),
        ("frc_b", crafted_trial("frc_b", 1, initial_force_v=0.5),
         frozenset({"initial_force"})),
        ("tmp_a", crafted_trial("tmp_a", 1, initial_active_c=50.9),
         frozenset({"initial_temp"})),
        ("tmp_b", crafted_trial("tmp_b", 1, initial_active_c=45.0),
         frozenset({"initial_temp"})),
        ("flt_a", crafted_trial("flt_a", 1, thermal_fault=True),
         frozenset({"sensor_fault"})),
        ("flt_b", crafted_trial("flt_b", 2, thermal_fault=True),
         frozenset({"sensor_fault"})),
        ("slw_a", crafted_trial("slw_a", 1, max_abs_prop=0.9),
         frozenset({"slow_grasp"})),
        ("slw_b", crafted_trial("slw_b", 1, max_abs_prop=0.2),
         frozenset({"slow_grasp"})),
        ("het_a", crafted_trial("het_a", 1, heterogeneous=True),
         frozenset({"heterogeneous"})),
        ("het_b", crafted_trial("het_b", 1, heterogeneous=True),
         frozenset({"heterogeneous"})),
    ]
    retained, reports = filter_dataset([t for _, t, _ in suite])
    expected = [
        ExclusionReport(
            object_id=oid,
            trial_index=t.trial_index,
            retained=not rules,
            rules_fired=rules,
        )
        for oid, t, rules in suite
    ]
    assert reports == expected
    assert len(retained) == 1
    assert retained[0].object_id == "keep"


# --------------------------------------------------------------------------
# 4. Padding contract at valid_len 300, bit-exact through serialization


def test_c04_padding_contract_round_trip(tmp_path):
    rng = np.random.default_rng(1004)
    n = 350
    channels = {
        name: rng.normal(loc=i, scale=0.5, size=n)
        for i, name in enumerate(
            ("active_c", "passive_c", "force_v", "vibration",
             "proprioception", "d_active", "d_passive", "d_force",
             "impedance")
        )
    }
    events = ContactEvents(left=((10, 310),), right=((10, 310),),
                           segment=(10, 310))
    tensor = segment_and_pad(channels, events)
    assert tensor.valid_len == 300

    path = tmp_path / "t.bin"
    save_tensor(path, tensor)
    back = load_tensor(path)
    assert np.array_equal(back.channels, tensor.channels)
    assert back.valid_len == 300 and back.embodiment == tensor.embodiment

    force = back.channels[2]
    imped = back.channels[8]
    assert np.all(force[300:491] == force[299])  # constant extension
    assert force[299] != 0.0
    assert np.all(imped[300:491] == 0.0)  # zero extension
    assert np.any(imped[:300] != 0.0)


# --------------------------------------------------------------------------
# 5. End-to-end gradients: encoder + fusion against finite differences


def test_c05_gradient_check_encoder_plus_fusion():
    # Short sequences keep every ReLU preactivation and pooling window
    # away from its kink across the +-h interval, so central differences
    # measure the true gradient instead of a nonsmoothness artifact; the
    # layer chain is identical to the full-length model.
    rng = np.random.default_rng(1005)
    enc_cfg = tiny_config(seed=0)
    enc = HapticEncoder(enc_cfg, rng=np.random.default_rng(5),
                        dtype=np.float64)
    fus = FusionParams(FusionConfig(), rng=np.random.default_rng(6),
                       dtype=np.float64)
    batch = 2
    x = rng.normal(size=(batch, 9, 16))
    labels = rng.integers(0, 14, batch)
    weights = compute_class_weights(labels, 14)
    raw = rng.normal(size=(batch, 14))
    prior_probs = softmax(raw)
    std = (raw - raw.mean(axis=1, keepdims=True)) / raw.std(
        axis=1, keepdims=True
    )

    def forward() -> tuple[float, np.ndarray]:
        logits = enc.forward(x, train=True)
        fused = fus.forward_logits(logits, std, train=True)
        return composite_loss_batch(fused, labels, prior_probs, weights, 0.1)

    loss, dfused = forward()
    dhaptic, _ = fus.backward(dfused)
    enc.backward(dhaptic)

    params = enc.params() + fus.params()
    worst = finite_difference_check(
        lambda: forward()[0], params, rng, n_coords=200, h=1e-5
    )
    assert worst < 1e-4


# --------------------------------------------------------------------------
# 6. Benchmark classification: encoder beats the forest baseline


def test_c06_benchmark_encoder_and_forest(bench_a, encoder_a):
    assert encoder_a["wall_s"] <= 600.0
    enc_acc = encoder_a["test_accuracy"]
    assert enc_acc >= 0.90

    ds = bench_a["dataset"]
    tr, _, te = bench_a["split"]
    x = summary_matrix(bench_a["tensors"])
    forest = RandomForest(ForestConfig(seed=0)).fit(x[tr], ds.y[tr])
    forest_acc = accuracy(ds.y[te], forest.predict(x[te]))
    assert forest_acc >= 0.70
    assert forest_acc < enc_acc


# --------------------------------------------------------------------------
# 7. Ablation direction: force carries more signal than vibration


def test_c07_force_ablation_hurts_more_than_vibration(bench_a, encoder_a):
    ds = bench_a["dataset"]
    _, _, te = bench_a["split"]
    enc = encoder_a["model"]
    accs = {}
    for modality in ("force", "vibration"):
        zx = zero_modality(ds.x[te], modality)
        accs[modality] = accuracy(
            ds.y[te], predict_logits(enc, zx).argmax(axis=1)
        )
    assert accs["force"] <= accs["vibration"] - 0.05


# --------------------------------------------------------------------------
# 8. Fusion gain with an informative prior, no harm with a uniform one


@pytest.fixture(scope="module")
def bench_f():
    """Seven materials including brass, which is haptically aluminium."""
    b = build_benchmark(245, 202, SIX_PRESETS + ("brass",))
    ds = b["dataset"]
    b["split"] = stratified_object_split(ds.object_ids, ds.y, seed=0)
    return b


def test_c08_fusion_gain_and_no_harm(bench_f):
    ds = bench_f["dataset"]
    tr, va, te = bench_f["split"]
    result = train_encoder(
        ds.subset(tr), ds.subset(va), tiny_config(seed=0, epochs=10)
    )
    enc = result.model
    test_logits = predict_logits(enc, ds.x[te])
    haptic_acc = accuracy(ds.y[te], test_logits.argmax(axis=1))
    train_logits = predict_logits(enc, ds.x[tr])

    table = make_mock_prior_table(bench_f["materials"])
    informative = priors_for_objects(ds.object_ids, MockVisionProvider(table))
    uniform = {oid: uniform_prior() for oid in set(ds.object_ids)}

    fused_acc = {}
    for name, priors in (("informative", informative), ("uniform", uniform)):
        fus = pretrain_fusion(
            ds.subset(tr), enc, priors, tiny_fusion_config(seed=0),
            haptic_logits=train_logits,
        ).params
        probs = fused_predictions(enc, fus, ds.subset(te), priors)
        fused_acc[name] = accuracy(ds.y[te], probs.argmax(axis=1))

    assert fused_acc["informative"] >= haptic_acc + 0.02
    assert fused_acc["uniform"] >= haptic_acc - 0.02


# --------------------------------------------------------------------------
# 9. Uncertainty filter: keeps most trials, raises accuracy


def test_c09_uncertainty_filter_retention_and_accuracy(bench_a, encoder_a):
    ds = bench_a["dataset"]
    _, _, te = bench_a["split"]
    probs = softmax(encoder_a["test_logits"].astype(np.float64))
    thresholds = UNCERTAINTY_PRESETS["eval"]
    decisions = [uncertainty_filter(p, thresholds) for p in probs]
    kept = [i for i, d in enumerate(decisions) if d.accepted]
    retention = len(kept) / te.size
    assert retention >= 0.50
    retained_acc = accuracy(ds.y[te][kept], probs[kept].argmax(axis=1))
    assert retained_acc >= encoder_a["test_accuracy"]


# --------------------------------------------------------------------------
# 10. MCC against a brute-force indicator-matrix oracle


def mcc_brute_force(confusion: np.ndarray) -> float:
    """Pearson correlation of flattened column-centered one-hot matrices."""
    c = np.asarray(confusion, dtype=np.int64)
    counts = c.flatten()
    n = int(counts.sum())
    if n == 0:
        return 0.0
    k = c.shape[0]
    ii, jj = np.divmod(np.arange(k * k), k)
    y_true = np.repeat(ii, counts)
    y_pred = np.repeat(jj, counts)
    t = np.zeros((n, k))
    p = np.zeros((n, k))
    t[np.arange(n), y_true] = 1.0
    p[np.arange(n), y_pred] = 1.0
    tc = t - t.mean(axis=0)
    pc = p - p.mean(axis=0)
    num = float((tc * pc).sum())
    den = math.sqrt(float((tc * tc).sum()) * float((pc * pc).sum()))
    return 0.0 if den == 0.0 else num / den


def test_c10_mcc_matches_brute_force():
    rng = np.random.default_rng(1010)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 9))
        confusion = rng.integers(0, 20, size=(k, k))
        worst = max(
            worst,
            abs(mcc_from_confusion(confusion) - mcc_brute_force(confusion)),
        )
    assert worst <= 1e-12

    perfect = np.diag(np.full(5, 7))
    assert normalized_mcc(mcc_from_confusion(perfect)) == 1.0
    constant = np.zeros((5, 5), dtype=np.int64)
    constant[:, 2] = 9  # every class predicted as class 2
    assert normalized_mcc(mcc_from_confusion(constant)) == 0.5


# --------------------------------------------------------------------------
# 11. Embodiment transfer: finetuning ladder is monotone


def test_c11_embodiment_finetune_ladder(bench_a, encoder_a, fusion_a):
    t0 = time.perf_counter()
    pj = build_benchmark(200, 303, SIX_PRESETS, embodiment="franka_pj")
    pds = pj["dataset"]
    ptr, _, pte = stratified_object_split(
        pds.object_ids, pds.y, (0.7, 0.0, 0.3), seed=0
    )
    priors = dict(fusion_a["priors"])
    for oid in set(pds.object_ids):
        priors.setdefault(oid, uniform_prior())

    enc = encoder_a["model"]
    fus = fusion_a["params"]
    zero_shot = accuracy(
        pds.y[pte],
        fused_predictions(enc, fus, pds.subset(pte), priors).argmax(axis=1),
    )

    ladder = {}
    for fraction in (0.07, 0.30):
        enc_c = copy.deepcopy(enc)
        fus_c = copy.deepcopy(fus)
        finetune_fusion(
            pds.subset(ptr), enc_c, fus_c, priors, fraction,
            epochs=60, lr=5e-4, seed=0,
        )
        probs = fused_predictions(enc_c, fus_c, pds.subset(pte), priors)
        ladder[fraction] = accuracy(pds.y[pte], probs.argmax(axis=1))

    elapsed = time.perf_counter() - t0
    assert zero_shot < ladder[0.07] < ladder[0.30]
    assert elapsed < 900.0


# --------------------------------------------------------------------------
# 12. Compliance head on frozen embeddings


def test_c12_compliance_head_frozen_encoder(bench_a, encoder_a):
    ds = bench_a["dataset"]
    comp = ArrayDataset(ds.x, bench_a["compliance"], ds.object_ids)
    tr, va, _ = stratified_object_split(comp.object_ids, comp.y, seed=0)
    enc = encoder_a["model"]
    before = encoder_hash(enc)
    _, result = fit_compliance_head(
        enc, comp.subset(tr), comp.subset(va), seed=0
    )
    assert encoder_hash(enc) == before
    assert result.val_accuracy >= 0.90


# --------------------------------------------------------------------------
# 13. Pipeline determinism: identical config, identical artifact bytes


def hash_tree(root) -> dict[str, str]:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(
                path.read_bytes()
            ).hexdigest()
    return out


def test_c13_pipeline_determinism(tmp_path, capsys):
    def run_pipeline(root) -> str:
        steps = [
            ("synth", "--seed", "7", "--objects", "6", "--trials", "3",
             "--materials", "steel,foam", "--out", str(root / "raw")),
            ("featurize", "--seed", "7", "--in", str(root / "raw"),
             "--out", str(root / "feats")),
            ("train-haptic", "--seed", "7", "--in", str(root / "feats"),
             "--out", str(root / "enc"), "--epochs", "2"),
            ("train-fusion", "--seed", "7", "--in", str(root / "feats"),
             "--encoder", str(root / "enc" / "encoder.bin"),
             "--out", str(root / "fus"), "--epochs", "2"),
            ("eval", "--seed", "7", "--in", str(root / "feats"),
             "--checkpoint", str(root / "enc" / "encoder.bin"),
             "--fusion", str(root / "fus" / "fusion.json"),
             "--priors", str(root / "fus" / "priors.json")),
        ]
        for argv in steps:
            capsys.readouterr()
            assert dispatch(list(argv)) == 0, f"step {argv[0]} failed"
        return capsys.readouterr().out  # the eval step's metric lines

    out1 = run_pipeline(tmp_path / "run1")
    out2 = run_pipeline(tmp_path / "run2")
    assert hash_tree(tmp_path / "run1") == hash_tree(tmp_path / "run2")
    assert out1 == out2
    assert "accuracy " in out1
