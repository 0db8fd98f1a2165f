import csv
from dataclasses import replace

import numpy as np
import pytest

from amos import autodiff as ad
from amos import mixture
from amos.autodiff import Tape
from amos.data import BatchStream, Vocab, read_corpus
from amos.discriminator import PREFIX as DISC_PREFIX
from amos.errors import CheckpointError, NumericalError
from amos.gradcheck import TINY_VOCAB, tiny_batch, tiny_config
from amos.generator import HEAD_PREFIX
from amos.mixture import MIXTURE_WEIGHT
from amos.settings import resolve_mode
from amos.trainer import (MetricsRecord, build_model, curriculum_weights, init_state,
                          joint_loss, load_checkpoint, lr_schedule, run_pretraining, save_checkpoint,
                          train_step)


def tiny(**changes):
    config = replace(tiny_config(), **changes)
    return config, resolve_mode(config)


def backward(loss):
    with Tape() as tape:
        value = loss()
    tape.backward(value)
    tape.clear()
    return value


def stream_for(config):
    vocab = Vocab.load(config.vocab)
    sequences = [vocab.encode(s) for s in read_corpus(config.corpus)]
    return BatchStream(sequences, config.batch_size, config.seq_len, config.seed, config.mask_ratio), len(vocab)


def read_rows(path, drop_wall_ms=True):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return [row[:-1] for row in rows] if drop_wall_ms else rows


# ---- 学习率 ----

def test_lr_schedule_endpoints(tiny_config):
    config = replace(tiny_config, total_steps=100, warmup_steps=10, peak_lr=1e-3)
    assert lr_schedule(0, config) == 0.0
    assert lr_schedule(10, config) == pytest.approx(1e-3)
    assert lr_schedule(5, config) == pytest.approx(5e-4)
    assert lr_schedule(55, config) == pytest.approx(5e-4)
    assert lr_schedule(100, config) == 0.0


# ---- 课程模式 ----

def test_uniform_mixture_is_constant_and_v_gets_no_gradient():
    config, mode = tiny(mode="uniform_mixture")
    model = build_model(config, TINY_VOCAB, mode)
    loss = backward(lambda: joint_loss(tiny_batch(), mode, config, model, step=0).total)
    assert np.isfinite(loss.item())
    assert not model.params[MIXTURE_WEIGHT].grad.any()
    result = joint_loss(tiny_batch(), mode, config, model, step=0)
    np.testing.assert_allclose(result.gamma.data, 0.5)


def test_learned_mixture_v_receives_gradient():
    config, mode = tiny()
    model = build_model(config, TINY_VOCAB, mode)
    backward(lambda: joint_loss(tiny_batch(), mode, config, model, step=0).total)
    assert model.params[MIXTURE_WEIGHT].grad.any()


def test_single_head_matches_one_head_model():
    single, single_mode = tiny(mode="single_head:2")
    plain, plain_mode = tiny(head_depths=[2], mode="learned_mixture")
    a = joint_loss(tiny_batch(), single_mode, single, build_model(single, TINY_VOCAB, single_mode), step=3)
    b = joint_loss(tiny_batch(), plain_mode, plain, build_model(plain, TINY_VOCAB, plain_mode), step=3)
    assert a.total.item() == pytest.approx(b.total.item(), abs=1e-12)


def test_layer_switch_schedule():
    config, mode = tiny(mode="layer_switch", total_steps=10)
    model = build_model(config, TINY_VOCAB, mode)
    result = joint_loss(tiny_batch(), mode, config, model, step=0).generator
    early = curriculum_weights(mode, result, model.params, config, step=4)
    late = curriculum_weights(mode, result, model.params, config, step=5)
    assert (early.data[:, 0] == 1.0).all()
    assert (late.data[:, 1] == 1.0).all()


def test_random_layer_is_one_hot_per_position():
    config, mode = tiny(mode="random_layer")
    model = build_model(config, TINY_VOCAB, mode)
    gamma = joint_loss(tiny_batch(), mode, config, model, step=1).gamma.data
    assert set(np.unique(gamma)) <= {0.0, 1.0}
    np.testing.assert_array_equal(gamma.sum(axis=1), 1.0)


def test_fixed_mixture_weights():
    config, mode = tiny(mode="fixed_mixture", fixed_weights=[0.25, 0.75])
    model = build_model(config, TINY_VOCAB, mode)
    gamma = joint_loss(tiny_batch(), mode, config, model, step=0).gamma.data
    np.testing.assert_allclose(gamma, np.tile([0.25, 0.75], (gamma.shape[0], 1)))


def test_stop_grad_flag_reaches_generator():
    config, mode = tiny(stop_grad=False)
    assert not build_model(config, TINY_VOCAB, mode).generator.stop_grad
    config, mode = tiny()
    assert build_model(config, TINY_VOCAB, mode).generator.stop_grad


# ---- 梯度路由与符号 ----

def test_mixture_path_does_not_reach_projection_head():
    config, mode = tiny()
    model = build_model(config, TINY_VOCAB, mode)
    backward(lambda: joint_loss(tiny_batch(), mode, config, model, step=0).total)
    total = {n: model.params[n].grad.copy() for n in model.params if n.startswith(HEAD_PREFIX)}
    model.params.zero_grad()
    backward(lambda: joint_loss(tiny_batch(), mode, config, model, step=0).gen.total)
    for name, grad in total.items():
        np.testing.assert_allclose(grad, model.params[name].grad, rtol=1e-10, atol=1e-14)


def test_adv_mlm_lets_discriminator_reach_projection_head():
    config, mode = tiny(adv_mlm=True)
    model = build_model(config, TINY_VOCAB, mode)
    backward(lambda: joint_loss(tiny_batch(), mode, config, model, step=0).total)
    total = {n: model.params[n].grad.copy() for n in model.params if n.startswith(HEAD_PREFIX)}
    model.params.zero_grad()
    backward(lambda: joint_loss(tiny_batch(), mode, config, model, step=0).gen.total)
    assert any(not np.allclose(g, model.params[n].grad) for n, g in total.items())


def test_update_signs(monkeypatch):
    config, mode = tiny(dropout=0.0)
    model = build_model(config, TINY_VOCAB, mode)
    params = model.params
    batch = tiny_batch()

    backward(lambda: joint_loss(batch, mode, config, model, step=0).total)
    v_total = params[MIXTURE_WEIGHT].grad.copy()
    disc_names = [n for n in params if n.startswith(DISC_PREFIX)]
    disc_total = {n: params[n].grad.copy() for n in disc_names}

    # 不反转的直通梯度 ∂L_DISC/∂v
    monkeypatch.setattr(mixture.ad, "gradient_reversal", lambda x, m=1.0: ad.scale_gradient(x, m))
    params.zero_grad()
    backward(lambda: joint_loss(batch, mode, config, model, step=0).disc)
    v_disc = params[MIXTURE_WEIGHT].grad.copy()
    monkeypatch.undo()

    assert np.abs(v_disc).sum() > 0
    np.testing.assert_allclose(v_total, -config.lambda_ * v_disc, rtol=1e-8, atol=1e-14)
    # v 的更新方向 -∇total 与 +∂L_DISC/∂v 同向：对抗上升
    assert float(np.dot(-v_total, v_disc)) > 0

    # 判别器沿 -∇total 走一小步，L_DISC 下降
    before = joint_loss(batch, mode, config, model, step=0).disc.item()
    for name in disc_names:
        params[name].data = params[name].data - 1e-6 * disc_total[name]
    after = joint_loss(batch, mode, config, model, step=0).disc.item()
    assert after < before


# ---- 单步训练 ----

def test_train_step_is_deterministic(tiny_config):
    stream, vocab_size = stream_for(tiny_config)
    rows = []
    for _ in range(2):
        state = init_state(tiny_config, vocab_size)
        rows.append([train_step(stream.batch_at(s), state).deterministic_row(state.model.depths)
                     for s in range(4)])
    assert rows[0] == rows[1]


def test_metrics_header():
    assert MetricsRecord.header([1, 2]) == [
        "step", "l_gen", "l_gen_head_1", "l_gen_head_2", "l_disc", "rtd_acc_replaced",
        "gamma_mean_1", "gamma_mean_2", "disc_loss_head_1", "disc_loss_head_2",
        "n_replaced", "lr", "wall_ms"]


def test_nonfinite_losses_skip_then_abort(tiny_config, monkeypatch):
    import amos.trainer as trainer

    stream, vocab_size = stream_for(tiny_config)
    state = init_state(tiny_config, vocab_size)
    digest = state.model.params.digest()

    def explode(*args, **kwargs):
        raise NumericalError("non-finite activations")

    monkeypatch.setattr(trainer, "joint_loss", explode)
    assert train_step(stream.batch_at(0), state).skipped
    assert train_step(stream.batch_at(1), state).skipped
    with pytest.raises(NumericalError):
        train_step(stream.batch_at(2), state)
    assert state.model.params.digest() == digest


# ---- 检查点与完整运行 ----

def test_checkpoint_round_trip_is_byte_identical(tiny_config, tmp_path):
    stream, vocab_size = stream_for(tiny_config)
    state = init_state(tiny_config, vocab_size)
    train_step(stream.batch_at(0), state)
    first = save_checkpoint(state, tmp_path / "a.npz")
    second = save_checkpoint(load_checkpoint(first), tmp_path / "b.npz")
    assert first.read_bytes() == second.read_bytes()


def test_resumed_step_matches_uninterrupted(tiny_config, tmp_path):
    stream, vocab_size = stream_for(tiny_config)
    state = init_state(tiny_config, vocab_size)
    for s in range(3):
        train_step(stream.batch_at(s), state)
    path = save_checkpoint(state, tmp_path / "mid.npz")
    expected = train_step(stream.batch_at(3), state).deterministic_row(state.model.depths)
    resumed = load_checkpoint(path)
    assert resumed.step == 3
    assert train_step(stream.batch_at(3), resumed).deterministic_row(resumed.model.depths) == expected


def test_run_pretraining_outputs(tiny_config, tmp_path):
    result = run_pretraining(tiny_config, tmp_path / "run")
    rows = read_rows(result.metrics, drop_wall_ms=False)
    assert len(rows) - 1 == tiny_config.total_steps // tiny_config.log_interval == result.records
    assert [int(r[0]) for r in rows[1:]] == list(range(2, 13, 2))
    assert result.checkpoint.exists()
    gamma_rows = read_rows(result.gamma_trajectory, drop_wall_ms=False)
    assert gamma_rows[0] == ["step", "gamma_d1", "gamma_d2"]
    for row in gamma_rows[1:]:
        assert sum(float(x) for x in row[1:]) == pytest.approx(1.0, abs=1e-9)
    assert (tmp_path / "run" / "checkpoints" / "step_000006.npz").exists()


def test_uniform_run_writes_no_gamma_trajectory(make_config, tmp_path):
    result = run_pretraining(make_config(mode="uniform_mixture", total_steps=4), tmp_path / "run")
    assert result.gamma_trajectory is None
    assert not (tmp_path / "run" / "gamma_trajectory.csv").exists()


def test_runs_are_reproducible(tiny_config, tmp_path):
    a = run_pretraining(tiny_config, tmp_path / "a")
    b = run_pretraining(tiny_config, tmp_path / "b")
    assert read_rows(a.metrics) == read_rows(b.metrics)
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()


def test_interrupted_run_resumes_bitwise(tiny_config, tmp_path):
    full = run_pretraining(tiny_config, tmp_path / "full")
    partial = run_pretraining(tiny_config, tmp_path / "resumed", stop_after=6)
    resumed = run_pretraining(tiny_config, tmp_path / "resumed", resume=str(partial.checkpoint))
    assert read_rows(full.metrics) == read_rows(resumed.metrics)
    assert read_rows(full.replaced_losses, drop_wall_ms=False) == \
        read_rows(resumed.replaced_losses, drop_wall_ms=False)
    assert full.checkpoint.read_bytes() == resumed.checkpoint.read_bytes()


def test_resume_rejects_other_config(tiny_config, tmp_path):
    partial = run_pretraining(tiny_config, tmp_path / "run", stop_after=4)
    with pytest.raises(CheckpointError, match="different config"):
        run_pretraining(replace(tiny_config, lambda_=10.0), tmp_path / "run", resume=str(partial.checkpoint))


def test_failed_run_writes_error_report(tiny_config, tmp_path, monkeypatch):
    import amos.trainer as trainer

    def explode(*args, **kwargs):
        raise NumericalError("non-finite activations")

    monkeypatch.setattr(trainer, "joint_loss", explode)
    with pytest.raises(NumericalError):
        run_pretraining(tiny_config, tmp_path / "run")
    reports = list((tmp_path / "run" / "logs").glob("error_*.json"))
    assert len(reports) == 1


@pytest.mark.slow
def test_longer_run_learns(make_config, tmp_path):
    from amos.analysis import curriculum_summary, read_metrics

    config = make_config(total_steps=300, warmup_steps=20, log_interval=10, checkpoint_interval=100,
                         peak_lr=2e-3)
    result = run_pretraining(config, tmp_path / "run")
    table = read_metrics(result.metrics)
    l_gen = table.column("l_gen")
    assert np.nanmean(l_gen[-5:]) < np.nanmean(l_gen[:5])
    summary = curriculum_summary(result.metrics)
    assert summary.depths == [1, 2]
    assert 0.0 <= summary.gamma_last <= 1.0
