from fractions import Fraction

import numpy as np
import pytest

from pseudoflow import diffcore as dc
from pseudoflow import pipeline
from pseudoflow.errors import ContractError, DimensionError, TrainingError
from pseudoflow.flowinit import LabelSet, coarse_upsample
from pseudoflow.metrics import evaluate, exclude_labels_mask
from pseudoflow.pipeline import (
    ABLATION_ROWS,
    PipelineConfig,
    check_params,
    evaluate_scenes,
    format_ablation,
    generate_pseudo_labels,
    init_params,
    label_dataset,
    run_ablation,
    train,
)
from pseudoflow.scenes import generate_dataset, generate_synthetic_scene, sample_labels

SMALL = PipelineConfig(enc_widths=(8, 8), enc_radii=(0.5, 1.0), enc_ratios=(1.0, 0.5), corr_hidden=8,
                       label_ratio="1/8")


def _labeled(n=64, seed=0, ratio="1/8", **kw):
    s = generate_synthetic_scene(n_points=n, seed=seed, **kw)
    return s.with_labels(sample_labels(s, ratio, seed))


def test_config_text_roundtrip():
    cfg = PipelineConfig(label_ratio="1/32", enc_widths=(4, 8), enc_radii=(0.3, 0.6), enc_ratios=(1.0, 0.25),
                         use_memory=False, lr=0.002)
    back = PipelineConfig.from_text(cfg.to_text())
    assert back == cfg and back.label_ratio == Fraction(1, 32)
    assert "label_ratio = 1/32" in cfg.to_text()


def test_config_parse_errors():
    with pytest.raises(ContractError, match="unknown"):
        PipelineConfig.from_text("nope = 3\n")
    with pytest.raises(ContractError, match="line 1"):
        PipelineConfig.from_text("epochs 3\n")
    with pytest.raises(ContractError):
        PipelineConfig().override({"epochs": "many"})
    with pytest.raises(ContractError):
        PipelineConfig(label_ratio=1)
    cfg = PipelineConfig.from_text("# comment\nepochs = 3  # trailing\n\nuse_memory = false\n")
    assert cfg.epochs == 3 and cfg.use_memory is False


def test_lr_schedule():
    cfg = PipelineConfig()
    assert cfg.lr_at(0) == cfg.lr_at(24) == 0.001
    assert cfg.lr_at(25) == 0.0007


def test_zero_epochs_leaves_init_params():
    cfg = SMALL.override({"epochs": 0})
    params, report = train([_labeled()], cfg)
    assert params.equal(init_params(cfg)) and report.losses == []


def test_labels_are_copied_bitwise():
    s = _labeled(seed=1)
    cfg = SMALL
    F = generate_pseudo_labels(s, init_params(cfg), cfg)
    assert np.array_equal(F[s.labels.indices], s.labels.flows)
    assert F.shape == (64, 3) and np.isfinite(F).all()


def test_without_correlation_output_is_coarse():
    s = _labeled(seed=2, noise=0.0)
    cfg = SMALL.override({"use_correlation": False, "normalize": False})
    F = generate_pseudo_labels(s, None, cfg)
    np.testing.assert_array_equal(F, coarse_upsample(s.P, s.labels, cfg.knn_k))


def test_uniform_translation_propagates_exactly():
    t = np.array([0.3, -0.1, 0.2])
    s = generate_synthetic_scene(n_points=80, seed=3, translation=t)
    s = s.with_labels(sample_labels(s, "1/8", 0))
    for cfg in (SMALL, SMALL.override({"use_correlation": False})):
        F = generate_pseudo_labels(s, init_params(cfg, seed=4), cfg)
        np.testing.assert_allclose(F, np.tile(t, (80, 1)), rtol=0, atol=1e-15)
        assert evaluate(F, s.flow, exclude_labels_mask(80, s.labels)).epe < 1e-15


def test_training_is_deterministic():
    data = [_labeled(seed=i) for i in range(3)]
    cfg = SMALL.override({"epochs": 2, "batch_size": 2})
    pa, ra = train(data, cfg)
    pb, rb = train(data, cfg)
    assert ra.losses == rb.losses and pa.equal(pb)


def test_check_params_reports_layout_mismatch():
    params = init_params(SMALL)
    check_params(params, SMALL)
    with pytest.raises(DimensionError, match="shape"):
        check_params(params, SMALL.override({"corr_hidden": 4}))
    with pytest.raises(DimensionError, match="layout"):
        check_params(params, SMALL.override({"enc_widths": "8,8,8", "enc_radii": "0.5,1,2",
                                             "enc_ratios": "1,0.5,0.5"}))


def test_nonfinite_loss_raises(monkeypatch):
    monkeypatch.setattr(pipeline, "scene_loss", lambda prep, params, cfg: dc.as_tensor(np.nan))
    with pytest.raises(TrainingError, match="epoch 0, scene"):
        train([_labeled()], SMALL.override({"epochs": 1}))


def test_unlabeled_training_scene_rejected():
    with pytest.raises(ContractError):
        train([generate_synthetic_scene(n_points=16)], SMALL)


def test_report_text_includes_config():
    _, report = train([_labeled()], SMALL.override({"epochs": 1}))
    text = report.to_text()
    assert "loss[0] = " in text and "label_ratio = 1/8" in text


@pytest.fixture(scope="module")
def trained_run():
    cfg = PipelineConfig(epochs=50)
    data = label_dataset(generate_dataset(25, seed=5, n_points=256), cfg.label_ratio, 0)
    params, report = train(data[:20], cfg)
    return cfg, data[20:], params, report


@pytest.mark.slow
def test_loss_moving_average_decreases(trained_run):
    _, _, _, report = trained_run
    losses = np.array(report.losses)
    assert len(losses) == 50 and np.isfinite(losses).all()
    ma = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(ma) < 0)


@pytest.mark.slow
def test_trained_generator_beats_coarse(trained_run):
    cfg, held_out, params, _ = trained_run
    coarse = evaluate_scenes(held_out, None, cfg.override({"use_correlation": False}))
    model = evaluate_scenes(held_out, params, cfg)
    assert model.epe < coarse.epe


def test_ablation_rows():
    data = [_labeled(seed=i) for i in range(3)]
    cfg = SMALL.override({"epochs": 1})
    rows = run_ablation(data[:2], data[2:], cfg)
    assert [r.name for r in rows] == [name for name, _ in ABLATION_ROWS] and len(rows) == 5
    coarse = evaluate_scenes(data[2:], None, cfg.override({"use_correlation": False}))
    assert rows[0].metrics == coarse
    table = format_ablation(rows)
    assert len(table.splitlines()) == 6 and "corr+mem+smooth" in table


def test_ablation_needs_data():
    with pytest.raises(ContractError):
        run_ablation([], [_labeled()], SMALL)


def test_label_dataset_is_seeded():
    scenes = generate_dataset(2, seed=0, n_points=32)
    a = label_dataset(scenes, "1/8", 7)
    b = label_dataset(scenes, "1/8", 7)
    assert all(np.array_equal(x.labels.indices, y.labels.indices) for x, y in zip(a, b))
    assert isinstance(a[0].labels, LabelSet) and len(a[0].labels) == 4


def test_relabel_matches_fresh_preparation():
    s = _labeled(seed=6)
    cfg = SMALL.override({"label_cap": 4})
    prep = pipeline.prepare_scene(s, cfg)
    other = sample_labels(s, "1/8", 99)
    a = pipeline.relabel(prep, other, cfg)
    b = pipeline.prepare_scene(s, cfg, other)
    assert np.array_equal(a.coarse, b.coarse) and np.array_equal(a.unlabeled, b.unlabeled)
    assert np.array_equal(a.memory.indices, b.memory.indices) and np.array_equal(a.cand_mask, b.cand_mask)
    assert np.array_equal(a.labels.flows, b.labels.flows)
    assert a.intra is prep.intra and a.smooth is prep.smooth
    assert np.array_equal(prep.labels.indices, s.labels.indices)


def test_resampled_training_is_seeded():
    data = [generate_synthetic_scene(n_points=64, seed=i) for i in range(2)]
    cfg = SMALL.override({"epochs": 2, "resample_labels": True})
    pa, ra = train(data, cfg)
    pb, rb = train(data, cfg)
    assert ra.losses == rb.losses and pa.equal(pb)
    _, fixed = train(label_dataset(data, "1/8", 0), cfg.override({"resample_labels": False}))
    assert fixed.losses != ra.losses
    with pytest.raises(ContractError):
        train([generate_synthetic_scene(n_points=64).with_flow(None)], cfg)
