import csv
import math

import numpy as np
import pytest
from PIL import Image

from duconet.imageio import to_uint8
from duconet.metrics import (
    EmptyForegroundError,
    ImageMetrics,
    aggregate,
    evaluate_samples,
    export_weight_maps,
    image_metrics,
    psnr_from_mse,
    read_metrics_csv,
)
from duconet.network import AblationMode, DucoNetConfig, downsample_mask, init_params
from duconet.synth import PerturbSpec, generate_dataset


def test_perfect_prediction_hits_cap(rng):
    img = rng.uniform(size=(6, 6, 3))
    m = image_metrics(img, img, np.ones((6, 6)))
    assert m.mse == 0.0 and m.fmse == 0.0 and m.psnr == 100.0


def closed_form_psnr_error():
    gt = np.full((10, 10, 3), 0.5)
    m = image_metrics(gt + 16.0 / 255.0, gt, np.ones((10, 10)))
    return abs(m.mse - 256.0), abs(m.psnr - 10 * math.log10(65025 / 256))


def test_uniform_error_closed_form():
    mse_err, psnr_err = closed_form_psnr_error()
    assert mse_err <= 1e-9 and psnr_err <= 1e-6
    assert round(10 * math.log10(65025 / 256), 2) == 24.05


def foreground_fmse_error(seed=0):
    r = np.random.default_rng(seed)
    gt = r.uniform(0.2, 0.8, size=(20, 20, 3))
    mask = np.zeros((20, 20))
    mask[3:11, 5:17] = 1.0
    pred = gt.copy()
    pred[mask > 0.5] += r.uniform(-0.1, 0.1, size=(int(mask.sum()), 3))
    m = image_metrics(pred, gt, mask)
    rho = mask.mean()
    return abs(m.fmse - m.mse / rho), m


def test_fmse_equals_mse_over_rho():
    err, m = foreground_fmse_error()
    assert err <= 1e-9
    assert m.fmse >= m.mse and m.foreground_fraction == pytest.approx(0.24)


def test_full_foreground_fmse_equals_mse(rng):
    a, b = rng.uniform(size=(2, 7, 7, 3))
    m = image_metrics(a, b, np.ones((7, 7)))
    assert abs(m.fmse - m.mse) <= 1e-12


def test_soft_mask_thresholded(rng):
    a, b = rng.uniform(size=(2, 4, 4, 3))
    soft = np.full((4, 4), 0.5)
    soft[0, 0] = 0.51
    m = image_metrics(a, b, soft)
    assert m.fmse == pytest.approx(float((((a[0, 0] - b[0, 0]) * 255) ** 2).mean()), rel=1e-12)


def test_quantization_bound(rng):
    for _ in range(10):
        x = rng.uniform(size=(16, 16, 3))
        q = to_uint8(x) / 255.0
        assert image_metrics(q, x, np.ones((16, 16))).mse <= 3 * 0.5**2


def test_empty_foreground_and_shape_errors(rng):
    a = rng.uniform(size=(4, 4, 3))
    with pytest.raises(EmptyForegroundError):
        image_metrics(a, a, np.zeros((4, 4)))
    with pytest.raises(ValueError):
        image_metrics(a, a[:3], np.ones((4, 4)))


def test_psnr_cap_threshold():
    assert psnr_from_mse(255.0**2 * 1e-10 / 2) == 100.0
    assert psnr_from_mse(1.0) == pytest.approx(10 * math.log10(65025))


def test_aggregate_is_per_image_mean():
    rows = [ImageMetrics(1.0, 2.0, 30.0, 0.1), ImageMetrics(3.0, 6.0, 20.0, 0.3)]
    agg = aggregate(rows)
    assert agg == ImageMetrics(2.0, 4.0, 25.0, 0.2)


def test_evaluate_samples_and_csv(tmp_path):
    samples = generate_dataset(3, 8, PerturbSpec(seed=1))
    cfg = DucoNetConfig.tiny(ablation_mode=AblationMode.CM_AVG)
    report = evaluate_samples(samples, init_params(cfg), cfg)
    baseline = aggregate(image_metrics(s.composite, s.gt, s.mask) for s in samples)
    assert report.composite == baseline
    assert report.mean == aggregate(m for _, m in report.rows)
    path = tmp_path / "m.csv"
    report.write_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["id", "mse", "fmse", "psnr", "fg_fraction"]
    assert [r[0] for r in rows[1:]] == ["00000", "00001", "00002", "mean", "composite"]
    parsed = read_metrics_csv(path)
    assert parsed["composite"]["fmse"] == baseline.fmse


def test_export_weight_maps(tmp_path):
    cfg = DucoNetConfig.tiny(ablation_mode=AblationMode.CM_PIX)
    params = init_params(cfg)
    s = generate_dataset(1, 8, PerturbSpec())[0]
    paths = export_weight_maps(s.composite, s.mask, params, cfg, tmp_path)
    assert sorted(p.name for p in paths) == sorted(f"stage{t}_{c}.png" for t in (1, 2, 3) for c in "Lab")
    for t, side in zip((1, 2, 3), (1, 2, 4)):
        fg = downsample_mask(s.mask, side, side)[0, 0] > 0.5
        maps = [np.asarray(Image.open(tmp_path / f"stage{t}_{c}.png"), dtype=float) for c in "Lab"]
        for m in maps:
            assert m.shape == (side, side) and (m[~fg] == 0).all()
        if fg.any():
            # quantized weights still sum to ~1 on the foreground
            assert np.abs(sum(maps)[fg] - 255).max() <= 2
    avg = DucoNetConfig.tiny(ablation_mode=AblationMode.CM_AVG)
    with pytest.raises(ValueError):
        export_weight_maps(s.composite, s.mask, init_params(avg), avg, tmp_path)
