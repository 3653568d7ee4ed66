"""Tests for the byzantine strategy hooks."""

import numpy as np
import pytest

from piratesim.adversary import (ByzantineStrategy, OmniscientView,
                                 contaminate_model, corrupt_gradient,
                                 craft_target_mean, equivocates,
                                 falsifies, falsify_aggregation, withholds)
from piratesim.aggregation import Gradient
from piratesim.training import ModelState, apply_update


def grad(values, origin=0):
    return Gradient(values=np.asarray(values, dtype=np.float64),
                    payload_bytes=64, origin=origin, iteration=0)


def test_unknown_strategy_rejected():
    with pytest.raises(ValueError):
        ByzantineStrategy(kind="subtle")


def test_harmful_gradient_flips_and_perturbs():
    s = ByzantineStrategy("harmful-gradient", magnitude=2.0, noise_scale=0.5)
    g = grad([1.0, -3.0])
    out = corrupt_gradient(g, s, np.random.default_rng(11))
    expected = -2.0 * g.values + np.random.default_rng(11).normal(0.0, 0.5, 2)
    assert np.array_equal(out.values, expected)
    assert out.origin == g.origin
    assert out.payload_bytes == g.payload_bytes


def test_craft_solves_for_exact_aggregate():
    # four submitters, the other three sum to (3, 3); hitting a zero mean
    # requires submitting exactly (-3, -3)
    s = ByzantineStrategy("omniscient-craft",
                          target_vector=np.zeros(2))
    view = OmniscientView(others_sum=np.array([3.0, 3.0]), n=4)
    out = corrupt_gradient(grad([9.0, 9.0]), s, np.random.default_rng(0),
                           view=view)
    assert np.array_equal(out.values, [-3.0, -3.0])
    mean = (out.values + view.others_sum) / view.n
    assert np.array_equal(mean, [0.0, 0.0])


def test_craft_steers_parameters_exactly():
    target = np.array([4.0, -1.0])
    params = np.array([0.5, 0.5])
    lr = 0.25
    s = ByzantineStrategy("omniscient-craft", target_kind="params",
                          target_vector=target)
    view = OmniscientView(others_sum=np.zeros(2), n=1,
                          current_params=params, learning_rate=lr)
    forced = craft_target_mean(s, view)
    # a step of -lr * mean from params lands exactly on the target
    model = ModelState(params=params.copy())
    assert apply_update(model, forced, lr)
    assert np.allclose(model.params, target)


def test_craft_without_grant_degrades_to_harmful():
    s = ByzantineStrategy("omniscient-craft", magnitude=1.5,
                          noise_scale=0.1, target_vector=np.zeros(2))
    g = grad([2.0, 2.0])
    out = corrupt_gradient(g, s, np.random.default_rng(5), view=None)
    ref = corrupt_gradient(g, ByzantineStrategy(
        "harmful-gradient", magnitude=1.5, noise_scale=0.1),
        np.random.default_rng(5))
    assert np.array_equal(out.values, ref.values)


def test_craft_requires_target_and_visibility():
    view = OmniscientView(others_sum=np.zeros(2), n=2)
    with pytest.raises(ValueError):
        craft_target_mean(ByzantineStrategy("omniscient-craft"), view)
    s = ByzantineStrategy("omniscient-craft", target_kind="params",
                          target_vector=np.zeros(2))
    with pytest.raises(ValueError):
        craft_target_mean(s, view)   # no params or learning rate granted


def test_falsified_fold_flips_the_running_sum():
    s = ByzantineStrategy("falsify-partial-aggregation", magnitude=3.0,
                          noise_scale=0.25)
    comp3 = np.array([1.0, -2.0, 0.5])
    out = falsify_aggregation(comp3, s, np.random.default_rng(2))
    expected = -3.0 * comp3 + np.random.default_rng(2).normal(0.0, 0.25, 3)
    assert np.array_equal(out, expected)


def test_contamination_diverges_the_model_digest():
    s = ByzantineStrategy("contaminate-model", magnitude=0.1)
    params = np.array([1.0, 2.0, 3.0])
    out = contaminate_model(params, s, np.random.default_rng(3))
    assert out.shape == params.shape
    assert not np.array_equal(out, params)
    again = contaminate_model(params, s, np.random.default_rng(3))
    assert np.array_equal(out, again)    # seeded, hence replayable


def test_passive_strategies_leave_gradient_untouched():
    g = grad([1.0, 2.0])
    for kind in ("withhold", "equivocate-leader", "contaminate-model"):
        out = corrupt_gradient(g, ByzantineStrategy(kind),
                               np.random.default_rng(0))
        assert out is g


def test_strategy_predicates():
    assert withholds(ByzantineStrategy("withhold"))
    assert not withholds(ByzantineStrategy("harmful-gradient"))
    assert not withholds(None)
    assert equivocates(ByzantineStrategy("equivocate-leader"))
    assert not equivocates(None)
    assert falsifies(ByzantineStrategy("falsify-partial-aggregation"))
    assert not falsifies(None)


def test_target_vector_coerced_to_float_array():
    s = ByzantineStrategy("omniscient-craft", target_vector=[1, 2, 3])
    assert s.target_vector.dtype == np.float64
    assert np.array_equal(s.target_vector, [1.0, 2.0, 3.0])
