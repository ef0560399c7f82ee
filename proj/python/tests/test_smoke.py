import numpy as np
import pytest

import bgadapt


def test_filter_and_aggregation():
    rng = np.random.default_rng(3)
    b1 = rng.uniform(-3, 3, (5, 7)).astype(np.float32)
    adapts = [rng.uniform(-3, 3, (5, 7)).astype(np.float32) for _ in range(3)]
    f = bgadapt.filter_residual(adapts[0])
    assert f.shape == (5, 7)
    assert np.array_equal(f, np.minimum(adapts[0], 0))
    mu = bgadapt.aggregate_inference(b1, adapts)
    expected = b1.astype(np.float64) + sum(np.minimum(a, 0).astype(np.float64) for a in adapts)
    np.testing.assert_allclose(mu, expected, rtol=0, atol=1e-6)
    assert np.array_equal(bgadapt.aggregate_inference(b1, adapts[::-1]), mu)
    current = np.minimum(adapts[2], 0)
    assert np.array_equal(bgadapt.aggregate_training(b1, adapts[:2], current), mu)
    assert np.array_equal(bgadapt.aggregate_inference(b1, []), b1)


def test_bga_minus_term():
    for phi in np.linspace(0, 1, 101):
        assert bgadapt.bga_minus_term(phi) == pytest.approx(max(0.0, 1 - 2 * phi), abs=1e-12)


def test_pseudo_label_rule():
    gt = np.array([[3, 0, 0]], dtype=np.int32)
    probs = np.array([[[0.9, 0.8, 0.2]], [[0.1, 0.85, 0.3]]], dtype=np.float32)
    labels, source = bgadapt.pseudo_label(gt, probs, 0.7, 3, 3)
    assert labels.tolist() == [[3, 2, 0]]
    assert source.tolist() == [[0, 1, 2]]
    with pytest.raises(bgadapt.ConfigError):
        bgadapt.pseudo_label(gt, probs, 0.0, 3, 3)


def test_grouped_miou_worked_example():
    truth = np.array([[0, 1], [1, 1]], dtype=np.int32)
    pred = np.array([[0, 1], [0, 1]], dtype=np.int32)
    m = bgadapt.grouped_miou([pred], [truth], "4-1", 1)
    assert m["per_class_iou"][0] == pytest.approx(0.5)
    assert m["per_class_iou"][1] == pytest.approx(2 / 3)
    assert m["miou_incremental"] is None


def test_protocol_and_data():
    assert bgadapt.protocol_steps("4-1") == [(1, 4), (5, 5), (6, 6), (7, 7), (8, 8)]
    split = bgadapt.build_split("2-2", 2, 3, 7, 16)
    assert len(split) == 3
    image, label = split[0]
    assert image.shape == (3, 16, 16) and label.shape == (16, 16)
    assert set(np.unique(label)) <= {0, 3, 4}
    again = bgadapt.build_split("2-2", 2, 3, 7, 16)
    assert np.array_equal(again[0][0], image)
    with pytest.raises(bgadapt.ConfigError):
        bgadapt.protocol_steps("0-1")


def test_grad_check_and_negative_control():
    ok = bgadapt.grad_check(["sigmoid", "bga_minus"])
    assert [c["name"] for c in ok] == ["sigmoid", "bga_minus"]
    assert all(c["passed"] for c in ok)
    bad = bgadapt.grad_check(["bga_minus"], inject="bga_minus_sign")
    assert not bad[0]["passed"]
    assert "bga_minus" in bgadapt.grad_check_cases


def test_tiny_training_run(tmp_path):
    overrides = {
        "protocol": "2-2", "image_size": 16, "encoder_width": 6, "feature_width": 6, "head_hidden": 6,
        "train_count": 6, "val_count": 4, "probe_count": 2, "batch_size": 3,
        "epochs_initial": 1, "epochs_incremental": 1, "seed": 4,
    }
    reports = bgadapt.train(bgadapt.default_config(), tmp_path, overrides)
    assert [r["step"] for r in reports] == [1, 2, 3]
    assert reports[0]["miou_incremental"] is None
    assert reports[-1]["miou_all"] is not None
    assert (tmp_path / "metrics.jsonl").exists()
    with pytest.raises(bgadapt.ConfigError):
        bgadapt.train(bgadapt.default_config(), tmp_path, {"tau": "3"})
