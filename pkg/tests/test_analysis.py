import csv

import numpy as np
import pytest
from PIL import Image

from amos.analysis import (curriculum_summary, detect_discontinuities, disc_loss_histogram, downsample,
                           export_analysis, read_metrics, render_charts)
from amos.errors import AnalysisError
from amos.trainer import MetricsRecord, run_pretraining


def write_metrics(directory, steps, depths=(2, 3), gamma=None, seed=0):
    """合成一份 metrics.csv 与旁边的 replaced_losses.csv"""
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "metrics.csv"
    k = len(depths)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricsRecord.header(depths))
        for i, step in enumerate(steps):
            g = gamma(i) if gamma else rng.dirichlet(np.ones(k))
            gen_heads = [3.0 - 0.5 * j + rng.normal(0, 0.01) for j in range(k)]
            disc_heads = [0.5 + 0.2 * j for j in range(k)]
            writer.writerow([step, sum(gen_heads)] + gen_heads + [0.4, rng.uniform()] + list(g)
                            + disc_heads + [10, 1e-4, 12.5])
    with open(directory / "replaced_losses.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "head", "loss"])
        for step in steps:
            for d in depths:
                for _ in range(3):
                    writer.writerow([step, d, rng.exponential()])
    return path


def test_export_writes_all_tables(tmp_path):
    a = write_metrics(tmp_path / "learned", range(10, 1010, 10))
    b = write_metrics(tmp_path / "uniform", range(10, 1010, 10), seed=1)
    export = export_analysis([a, b], tmp_path / "analysis")

    with open(export.accuracy, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "learned", "uniform"]
    assert len(rows) == 101

    assert [p.name for p in export.gamma] == ["gamma_learned.csv", "gamma_uniform.csv"]
    gamma = read_metrics(export.gamma[0])
    total = gamma.column("gamma_mean_2") + gamma.column("gamma_mean_3")
    np.testing.assert_allclose(total, 1.0, atol=1e-9)


def test_gamma_trajectory_capped(tmp_path):
    path = write_metrics(tmp_path / "long", range(1, 1201))
    export = export_analysis([path], tmp_path / "analysis")
    gamma = read_metrics(export.gamma[0])
    assert len(gamma.steps) <= 500
    assert gamma.steps[-1] == 1200


def test_downsample_keeps_simplex():
    values = np.random.default_rng(0).dirichlet(np.ones(3), size=1001)
    steps, means = downsample(np.arange(1, 1002), values)
    assert len(steps) <= 500
    np.testing.assert_allclose(means.sum(axis=1), 1.0)


def test_histogram_counts_every_final_token(tmp_path):
    write_metrics(tmp_path / "run", range(10, 1010, 10))
    hists = disc_loss_histogram(tmp_path / "run" / "replaced_losses.csv")
    assert [h.head for h in hists] == [2, 3]
    for h in hists:
        # 最后 10% 的 10 个记录步，每步每头 3 个替换词
        assert h.counts.sum() == h.contributing == 30
    np.testing.assert_array_equal(hists[0].edges, hists[1].edges)


def test_misaligned_runs_rejected(tmp_path):
    a = write_metrics(tmp_path / "a", range(10, 1010, 10))
    b = write_metrics(tmp_path / "b", range(20, 1020, 20))
    with pytest.raises(AnalysisError, match="steps differ"):
        export_analysis([a, b], tmp_path / "analysis")


def test_missing_column_rejected(tmp_path):
    path = tmp_path / "metrics.csv"
    path.write_text("step,l_gen,gamma_mean_2\n1,3.0,1.0\n", encoding="utf-8")
    with pytest.raises(AnalysisError, match="rtd_acc_replaced"):
        export_analysis([path], tmp_path / "analysis")


def test_missing_file_rejected(tmp_path):
    with pytest.raises(AnalysisError, match="not found"):
        read_metrics(tmp_path / "nope.csv")


def test_discontinuity_at_switch():
    steps = np.arange(1, 201)
    values = np.where(steps < 100, 0.9, 0.6) + np.random.default_rng(0).normal(0, 0.01, size=200)
    (found,) = detect_discontinuities(steps, values, [100], window=10)
    assert found.significant
    assert found.jump == pytest.approx(0.3, abs=0.02)

    (flat,) = detect_discontinuities(steps, np.full(200, 0.5) + np.random.default_rng(1).normal(0, 0.05, 200),
                                     [100], window=10)
    assert flat.jump < 0.1


def test_curriculum_summary(tmp_path):
    path = write_metrics(tmp_path / "run", range(1, 101), gamma=lambda i: [1 - i / 100, i / 100])
    summary = curriculum_summary(path)
    assert summary.gen_loss_decreasing
    assert summary.deep_disc_loss_higher
    assert summary.gamma_rises


def test_render_charts(tmp_path):
    a = write_metrics(tmp_path / "a", range(10, 510, 10))
    b = write_metrics(tmp_path / "b", range(10, 510, 10), seed=2)
    out = render_charts([a, b], tmp_path / "charts.png")
    with Image.open(out) as image:
        assert image.format == "PNG"
        # 每个运行两张面板，另加两张对比面板
        assert image.height == 6 * 320


@pytest.mark.slow
def test_layer_switch_run_shows_discontinuity(make_config, tmp_path):
    config = make_config(mode="layer_switch", head_depths=[1, 2, 3], switch_points=[1 / 3, 2 / 3],
                         total_steps=300, warmup_steps=10, log_interval=5, checkpoint_interval=150,
                         peak_lr=2e-3)
    result = run_pretraining(config, tmp_path / "run")
    table = read_metrics(result.metrics)
    switches = [round(p * config.total_steps) for p in config.switch_points]
    assert switches == [100, 200]

    for depth, switch in zip((2, 3), switches):
        (found,) = detect_discontinuities(table.steps, table.column(f"gamma_mean_{depth}"), [switch], window=5)
        assert found.significant, depth
        assert found.jump > 0.6, depth
    assert np.nanmean(table.column("gamma_mean_1")[table.steps < switches[0]]) == pytest.approx(1.0)

    found = detect_discontinuities(table.steps, table.column("l_disc"), switches, window=5)
    assert all(np.isfinite(d.jump) and np.isfinite(d.noise) for d in found)
