from dataclasses import replace

import pytest

from amos.gradcheck import TOLERANCE, run_gradient_suite, tiny_config
from amos.settings import TrainConfig


@pytest.mark.parametrize("mode", ["learned_mixture", "uniform_mixture", "random_layer",
                                  "layer_switch", "single_head:2", "fixed_mixture"])
def test_sampled_gradients_match(mode):
    result = run_gradient_suite(TrainConfig(mode=mode), max_elements=3)
    assert not result.report.failures
    assert result.passed(), result.group_errors


@pytest.mark.parametrize("changes", [{"adv_mlm": True}, {"soft_disc_input": True}, {"lambda_": 1.0}])
def test_sampled_gradients_match_variants(changes):
    result = run_gradient_suite(replace(TrainConfig(), **changes), max_elements=3)
    assert result.passed(), result.group_errors


def test_all_parameter_groups_checked():
    result = run_gradient_suite(max_elements=1)
    assert set(result.group_errors) == {"shared", "gen", "disc", "mixture"}


def test_tiny_config_keeps_objective_settings():
    base = TrainConfig(lambda_=20.0, tau=0.5, adv_mlm=True)
    config = tiny_config(base)
    assert (config.lambda_, config.tau, config.adv_mlm) == (20.0, 0.5, True)
    assert config.head_depths == [1, 2]


@pytest.mark.slow
def test_full_gradient_suite():
    result = run_gradient_suite()
    assert result.max_error < TOLERANCE
