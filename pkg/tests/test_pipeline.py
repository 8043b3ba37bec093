import json

import numpy as np
import pytest

from mquant.model import build_toy_mllm, model_fingerprint, model_forward
from mquant.msq_aifs import VISUAL, ModalityLayout, layout_from_string
from mquant.pipeline import (
    CalibrationResult,
    PipelineConfig,
    apply_lossless_stack,
    bench,
    calibrate_pipeline,
    cosine_and_mse,
    evaluate,
    generate_synthetic_samples,
    mquant_quantize,
    new_state,
    qmodel_from_dict,
    qmodel_to_dict,
    stage_build_rms_plans,
    stage_calibrate,
    stage_quantize_llm_weights,
    stage_rotate_llm,
    stage_rotate_vision,
    stage_set_calibration,
    stage_vision_rewrite,
)


def small_pcfg(**overrides):
    base = dict(d_model=16, n_heads=2, vision_blocks=1, llm_blocks=2, mlp_ratio=2)
    base.update(overrides)
    return PipelineConfig.from_dict(base)


@pytest.fixture(scope="module")
def setup():
    pcfg = small_pcfg()
    model = build_toy_mllm(pcfg.model)
    samples = generate_synthetic_samples(6, 10, seed=42, d_model=16)
    return pcfg, model, samples


# ===== config =====


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        PipelineConfig.from_dict({"bits_w": 8, "bogus": 1})


def test_config_validates_values():
    with pytest.raises(ValueError, match="bits_w"):
        PipelineConfig(bits_w=7)
    with pytest.raises(ValueError, match="granularity"):
        PipelineConfig(weight_granularity="per_row")
    with pytest.raises(ValueError, match="split_bits"):
        PipelineConfig(split_bits=5)
    with pytest.raises(ValueError, match="group_size"):
        PipelineConfig(group_size=0)


def test_config_roundtrip():
    pcfg = small_pcfg(bits_w=4, rms=False, group_size=32)
    again = PipelineConfig.from_dict(pcfg.to_dict())
    assert again.to_dict() == pcfg.to_dict()


def test_randomized_rotation_forces_splits_off():
    pcfg = small_pcfg(randomized_rotation=True)
    assert pcfg.rms and not pcfg.rms_effective
    assert small_pcfg().rms_effective


# ===== synthetic samples =====


def test_samples_magnitude_split():
    samples = generate_synthetic_samples(10, 12, seed=0, d_model=8)
    for rows, layout in samples:
        vis = rows[layout.modality == VISUAL]
        txt = rows[layout.modality == 0]
        assert vis.min() >= -20.0 and vis.max() <= 10.0
        assert txt.min() >= -0.5 and txt.max() <= 0.5
        assert vis.shape[0] > 0 and txt.shape[0] > 0  # both modalities present


def test_samples_deterministic_by_seed():
    a = generate_synthetic_samples(3, 8, seed=5, d_model=4)
    b = generate_synthetic_samples(3, 8, seed=5, d_model=4)
    for (xa, la), (xb, lb) in zip(a, b):
        assert np.array_equal(xa, xb)
        assert np.array_equal(la.modality, lb.modality)


def test_samples_fixed_layout():
    samples = generate_synthetic_samples(2, 4, layout_spec="tvvt", seed=0, d_model=4)
    for _, layout in samples:
        np.testing.assert_array_equal(layout.modality, [0, 1, 1, 0])
    with pytest.raises(ValueError, match="layout length"):
        generate_synthetic_samples(1, 5, layout_spec="tv", d_model=4)


def test_samples_length_one_is_text():
    samples = generate_synthetic_samples(3, 1, seed=0, d_model=4)
    for _, layout in samples:
        assert layout.visual_count == 0


# ===== stage guards =====


def test_quantize_before_rotation_fails(setup):
    pcfg, model, _ = setup
    state = new_state(model, pcfg)
    with pytest.raises(ValueError, match="stage order violation"):
        stage_quantize_llm_weights(state)


def test_calibrate_after_vision_rewrite_fails(setup):
    pcfg, model, samples = setup
    state = new_state(model, pcfg)
    stage_rotate_llm(state)
    stage_vision_rewrite(state)
    with pytest.raises(ValueError, match="float vision"):
        stage_calibrate(state, samples)


def test_vision_rotation_requires_rewrite(setup):
    pcfg, model, _ = setup
    state = new_state(model, pcfg)
    stage_rotate_llm(state)
    with pytest.raises(ValueError, match="vision_rewrite"):
        stage_rotate_vision(state)


def test_split_plans_require_both_rotations(setup):
    pcfg, model, _ = setup
    state = new_state(model, pcfg)
    stage_rotate_llm(state)
    with pytest.raises(ValueError, match="rotate_vision"):
        stage_build_rms_plans(state)


def test_stage_cannot_run_twice(setup):
    pcfg, model, _ = setup
    state = new_state(model, pcfg)
    stage_rotate_llm(state)
    with pytest.raises(ValueError, match="already"):
        stage_rotate_llm(state)
    state2 = new_state(model, pcfg)
    stage_rotate_llm(state2)
    stage_vision_rewrite(state2)
    with pytest.raises(ValueError, match="already ran"):
        stage_vision_rewrite(state2)


def test_set_calibration_checks_fingerprint(setup):
    pcfg, model, samples = setup
    calib = calibrate_pipeline(model, samples, pcfg)
    other = build_toy_mllm(small_pcfg(seed=99).model)
    state = new_state(other, pcfg)
    stage_rotate_llm(state)
    with pytest.raises(ValueError, match="calibration was made for"):
        stage_set_calibration(state, calib)


def test_set_calibration_checks_settings(setup):
    pcfg, model, samples = setup
    calib = calibrate_pipeline(model, samples, pcfg)
    state = new_state(model, small_pcfg(bits_a=4))
    stage_rotate_llm(state)
    with pytest.raises(ValueError, match="bits_a"):
        stage_set_calibration(state, calib)


def test_exactly_one_calibration_source(setup):
    pcfg, model, samples = setup
    with pytest.raises(ValueError, match="exactly one"):
        mquant_quantize(model, pcfg)
    calib = calibrate_pipeline(model, samples, pcfg)
    with pytest.raises(ValueError, match="exactly one"):
        mquant_quantize(model, pcfg, samples=samples, calib=calib)


# ===== end-to-end quality =====


def test_stage_log_order(setup):
    pcfg, model, samples = setup
    qm = mquant_quantize(model, pcfg, samples=samples)
    assert qm.stage_log == [
        "rotate_llm", "quantize_llm_weights", "calibrate", "vision_rewrite",
        "rotate_vision", "quantize_vision_weights", "build_rms_plans",
    ]


def test_lossless_stack_preserves_forward(setup):
    pcfg, model, samples = setup
    transformed, _, _ = apply_lossless_stack(model, pcfg)
    for rows, layout in samples[:3]:
        a = model_forward(model, rows, layout.modality)
        b = model_forward(transformed, rows, layout.modality)
        np.testing.assert_allclose(b, a, atol=1e-5)


def test_w16a16_is_near_exact(setup):
    _, model, samples = setup
    pcfg = small_pcfg(bits_w=16, bits_a=16)
    qm = mquant_quantize(model, pcfg, samples=samples)
    report = evaluate(qm, samples)
    assert report["metrics"]["cosine_min"] > 0.9999


def test_w8a8_beats_w4a8(setup):
    pcfg, model, samples = setup
    r8 = evaluate(mquant_quantize(model, pcfg, samples=samples), samples)
    r4 = evaluate(
        mquant_quantize(model, small_pcfg(bits_w=4), samples=samples), samples
    )
    assert r8["metrics"]["cosine_mean"] > r4["metrics"]["cosine_mean"]


def test_vision_triggers_llm_does_not(setup):
    pcfg, model, samples = setup
    qm = mquant_quantize(model, pcfg, samples=samples)
    table = evaluate(qm, samples)["rms_compliance"]
    assert table["vision"]["ratio"] == 1.0
    assert table["llm"]["ratio"] == 0.0


def test_rms_off_builds_no_plans(setup):
    _, model, samples = setup
    qm = mquant_quantize(model, small_pcfg(rms=False), samples=samples)
    assert qm.plans == {}
    assert "build_rms_plans" not in qm.stage_log
    # down-projections are then quantized like every other weight
    assert "llm.0.w_down" in qm.weight_q and "vision.0.w_down" in qm.weight_q


def test_aifs_off_matches_aifs_on(setup):
    pcfg, model, samples = setup
    r_on = evaluate(mquant_quantize(model, pcfg, samples=samples), samples)
    r_off = evaluate(
        mquant_quantize(model, small_pcfg(aifs=False), samples=samples), samples
    )
    assert abs(
        r_on["metrics"]["cosine_mean"] - r_off["metrics"]["cosine_mean"]
    ) < 1e-6


def test_per_group_granularity_runs(setup):
    _, model, samples = setup
    pcfg = small_pcfg(weight_granularity="per_group", group_size=8)
    qm = mquant_quantize(model, pcfg, samples=samples)
    report = evaluate(qm, samples)
    assert report["metrics"]["cosine_mean"] > 0.9
    some = qm.weight_q["llm.0.wq"].params
    assert some.granularity.value == "per_group" and some.group_size == 8


def test_counters_exact(setup):
    pcfg, model, samples = setup
    qm = mquant_quantize(model, pcfg, samples=samples)
    blocks = len(qm.model.llm_blocks)
    for length in (1, 5, 32):
        rows, layout = generate_synthetic_samples(1, length, seed=length, d_model=16)[0]
        qm.forward(rows, layout.modality)
        assert qm.counter.scale_ops == 2 * blocks
        qm.forward(rows, layout.modality, dynamic=True)
        assert qm.counter.scale_ops == length * blocks


def test_passthrough_matches_transformed_float(setup):
    pcfg, model, samples = setup
    qm = mquant_quantize(model, pcfg, samples=samples)
    rows, layout = samples[0]
    out = qm.forward(rows, layout.modality, weights_on=False, acts_on=False)
    ref = model_forward(qm.model, rows, layout.modality)
    np.testing.assert_allclose(out, ref, atol=1e-9)


# ===== evaluate / bench =====


def test_cosine_short_circuit():
    a = np.random.default_rng(0).normal(size=(3, 4))
    assert cosine_and_mse(a, a) == (1.0, 0.0)
    assert cosine_and_mse(np.zeros((2, 2)), np.zeros((2, 2))) == (1.0, 0.0)
    cos, mse = cosine_and_mse(a, np.zeros_like(a))
    assert cos == 0.0 and mse > 0


def test_evaluate_report_contents(setup):
    pcfg, model, samples = setup
    qm = mquant_quantize(model, pcfg, samples=samples)
    report = evaluate(qm, samples)
    assert report["kind"] == "eval" and report["schema_version"] == 1
    assert "rtn" in report["weight_solver"]
    assert report["config"] == pcfg.to_dict()
    assert report["activation_mode"] == "static_msq"
    assert len(report["metrics"]["per_sample"]) == len(samples)
    assert len(report["activations"]["msq"]) == 2  # one per llm block
    # every quantized layer shows its grid
    assert "llm.0.wq" in report["per_layer"]


def test_evaluate_is_deterministic(setup):
    pcfg, model, samples = setup
    qm = mquant_quantize(model, pcfg, samples=samples)
    a = json.dumps(evaluate(qm, samples), sort_keys=True)
    qm2 = mquant_quantize(model, pcfg, samples=samples)
    b = json.dumps(evaluate(qm2, samples), sort_keys=True)
    assert a == b


def test_bench_scale_op_columns(setup):
    pcfg, model, samples = setup
    qm = mquant_quantize(model, pcfg, samples=samples)
    report = bench(qm, [1, 4, 16], seed=0)
    blocks = len(qm.model.llm_blocks)
    for entry in report["entries"]:
        assert entry["static"]["scale_ops"] == 2 * blocks
        assert entry["dynamic"]["scale_ops"] == entry["length"] * blocks
        assert entry["static"]["seconds"] >= 0.0
    assert "informational" in report["note"]


# ===== serialization =====


def test_calibration_roundtrip(setup):
    pcfg, model, samples = setup
    calib = calibrate_pipeline(model, samples, pcfg)
    assert calib.fingerprint == model_fingerprint(model)
    again = CalibrationResult.from_dict(json.loads(json.dumps(calib.to_dict())))
    qm = mquant_quantize(model, pcfg, calib=again)
    rows, layout = samples[0]
    ref = mquant_quantize(model, pcfg, samples=samples).forward(rows, layout.modality)
    assert np.array_equal(qm.forward(rows, layout.modality), ref)


def test_calibration_wrong_kind_rejected():
    with pytest.raises(ValueError, match="calibration file"):
        CalibrationResult.from_dict({"kind": "eval"})


def test_qmodel_roundtrip_bit_exact(setup):
    pcfg, model, samples = setup
    qm = mquant_quantize(model, pcfg, samples=samples)
    blob = json.dumps(qmodel_to_dict(qm), sort_keys=True)
    qm2 = qmodel_from_dict(json.loads(blob))
    rows, layout = samples[1]
    assert np.array_equal(
        qm.forward(rows, layout.modality), qm2.forward(rows, layout.modality)
    )
    # serializing again produces the same bytes
    assert json.dumps(qmodel_to_dict(qm2), sort_keys=True) == blob


def test_qmodel_wrong_kind_rejected():
    with pytest.raises(ValueError, match="quantized model"):
        qmodel_from_dict({"kind": "calibration"})
