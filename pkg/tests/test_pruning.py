import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sseds import kernels
from sseds.dataio import Batch
from sseds.errors import ConfigError, DataError, NumericalError
from sseds.pruning import (
    PassCounter,
    PruneMask,
    apply_mask,
    compute_slot_gradients,
    draw_saliency_batches,
    exact_loss_change,
    finite_diff_oracle,
    prune_report,
    saliency,
    select_mask,
    table_chain_rule_gradients,
)

from conftest import random_batch, small_model


def _trained(model):
    model.step = 1
    return model


# ---------------------------------------------------------------- select_mask


def test_hand_run_greedy_example():
    # ranking (f0,d1) > (f1,d0) > (f0,d0) > (f1,d1)
    s = np.array([[0.2, 0.4], [0.3, 0.1]])
    pm = select_mask(s, [10, 10], 0.5)
    assert pm.mask.tolist() == [[False, True], [True, False]]
    assert pm.kept_params == 20 == pm.budget
    assert pm.threshold == 0.3


def test_kappa_one_keeps_everything(rng):
    s = rng.random((4, 5))
    pm = select_mask(s / s.sum(), [3, 8, 1, 20], 1.0)
    assert pm.mask.all() and pm.kept_params == pm.total_params


def test_ties_break_by_field_then_dim():
    s = np.full((2, 2), 0.25)
    pm = select_mask(s, [5, 5], 0.5)
    assert pm.mask.tolist() == [[True, True], [False, False]]


def test_budget_decimal_is_exact():
    # 0.29 * 100 is 28.999... in binary floating point
    pm = select_mask(np.full((1, 100), 0.01), [1], 0.29)
    assert pm.budget == 29 and pm.kept_params == 29


def test_budget_below_smallest_field_warns():
    with pytest.warns(RuntimeWarning):
        pm = select_mask(np.array([[0.5, 0.5]]), [10], 0.01)
    assert not pm.mask.any() and pm.threshold is None


def test_quantile_mode_keeps_slot_count():
    s = np.arange(12, dtype=float).reshape(3, 4)
    pm = select_mask(s / s.sum(), [1, 100, 1], 0.25, mode="quantile")
    # top three slots are field 2, dims 3, 2, 1; costs are ignored in this mode
    assert pm.mask.sum() == 3 and pm.mask[2, 1:].all()
    assert pm.kept_params == 3


def test_select_mask_rejects_bad_kappa():
    for k in (0.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            select_mask(np.ones((2, 2)) / 4, [1, 1], k)


@st.composite
def _maps(draw):
    m = draw(st.integers(1, 6))
    d = draw(st.integers(1, 8))
    sizes = draw(st.lists(st.integers(1, 60), min_size=m, max_size=m))
    # include ties by drawing from a small grid
    s = np.array(draw(st.lists(st.integers(0, 6), min_size=m * d, max_size=m * d)), float).reshape(m, d)
    return s + 1e-3, sizes


@settings(max_examples=300, deadline=None)
@given(_maps())
def test_budget_maximality_and_nesting(case):
    s, sizes = case
    m, d = s.shape
    prev = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for kappa in (0.1, 0.3, 0.5, 0.9, 1.0):
            pm = select_mask(s, sizes, kappa)
            kept = sum(sizes[i] for i, j in zip(*np.nonzero(pm.mask)))
            assert kept == pm.kept_params <= kappa * m * d * sum(sizes) + 1e-9
            rejected = [k for k in pm.order if not pm.mask.flat[k]]
            if rejected:
                assert kept + sizes[rejected[0] // d] > pm.budget
            if prev is not None:
                assert not (prev & ~pm.mask).any()
            prev = pm.mask


# ---------------------------------------------------------------- apply_mask


def test_full_mask_reproduces_tables():
    model = small_model("FM", sizes=(5, 6), d=3)
    mixed = apply_mask(model, PruneMask(np.ones((2, 3), bool), None, 1.0, 0, 0, 0))
    assert mixed.q == 2
    for a, b in zip(mixed.tables, model.tables):
        assert a.tobytes() == b.tobytes()


def test_mask_columns_copied_verbatim():
    model = small_model("FM", sizes=(5, 6), d=4)
    mask = np.array([[True, False, True, False], [False, False, False, False]])
    mixed = apply_mask(model, PruneMask(mask, None, 1.0, 0, 0, 0))
    assert mixed.q == 1 and mixed.dims == [2] and mixed.removed_fields == [1]
    assert mixed.tables[0].tobytes() == np.ascontiguousarray(model.tables[0][:, [0, 2]]).tobytes()


def test_retained_count_matches_mask(rng):
    model = small_model("FM", sizes=(9, 4, 17), d=6)
    s = saliency(rng.random((3, 6)))
    pm = select_mask(s, model.field_sizes, 0.4)
    mixed = apply_mask(model, pm)
    assert mixed.n_params == pm.kept_params


# ---------------------------------------------------------------- saliency


def test_saliency_normalises():
    s = saliency(np.array([[1.0, -3.0], [0.0, 4.0]]))
    assert abs(s.sum() - 1) < 1e-9
    assert s[0, 1] == pytest.approx(0.375)


def test_degenerate_saliency():
    with pytest.raises(NumericalError, match="degenerate"):
        saliency(np.zeros((2, 3)))


def test_single_pass_counter(rng):
    model = _trained(small_model("DeepFM", sizes=(40, 30, 20, 10), d=8, hidden=(16,)))
    counter = PassCounter()
    compute_slot_gradients(model, random_batch(rng, model.field_sizes, 64), counter)
    assert counter.forward_backward == 1


def test_untrained_model_and_empty_batch(rng):
    model = small_model("FM")
    with pytest.raises(NumericalError):
        compute_slot_gradients(model, random_batch(rng, model.field_sizes, 4))
    _trained(model)
    empty = Batch(np.zeros((0, 3), np.int64), np.zeros(0, np.uint8), 0)
    with pytest.raises(DataError):
        compute_slot_gradients(model, empty)


@pytest.mark.parametrize("arch", ["FM", "WideDeep", "DeepFM"])
def test_chain_rule_identity(arch, rng):
    model = _trained(small_model(arch, sizes=(8, 11, 5), d=5, seed=7))
    batch = random_batch(rng, model.field_sizes, 32)
    g = compute_slot_gradients(model, batch)
    np.testing.assert_allclose(g, table_chain_rule_gradients(model, batch), rtol=1e-10, atol=1e-14)


def test_finite_difference_oracle_agrees(rng):
    model = _trained(small_model("DeepFM", sizes=(6, 6, 6), d=3, seed=2))
    batch = random_batch(rng, model.field_sizes, 2)
    g = compute_slot_gradients(model, batch)
    for i in range(3):
        for j in range(3):
            fd = finite_diff_oracle(model, batch, i, j, 1e-6)
            assert fd == pytest.approx(g[i, j], rel=1e-4, abs=1e-8)


def test_exact_loss_change_zeroes_slot(rng):
    model = _trained(small_model("FM", sizes=(4, 4), d=2, seed=0))
    batch = random_batch(rng, model.field_sizes, 8)
    delta = exact_loss_change(model, batch, 1, 0)
    masked = model.copy()
    masked.tables[1][:, 0] = 0
    masked.touch()
    from sseds.model import forward, loss

    want = loss(forward(model, batch)[0], batch.labels) - loss(forward(masked, batch)[0], batch.labels)
    assert delta == pytest.approx(want, rel=1e-12)


def test_scale_covariance_with_frozen_logits(rng):
    # two-field FM: with the logit residual held fixed every slot gradient
    # is homogeneous of degree two in the embeddings, so the ranking holds
    E = rng.standard_normal((50, 2, 6))
    dz = rng.standard_normal(50)

    def slot_grads(E):
        fm, S = kernels.fm_forward(E)
        return kernels.slot_grad_reduce(kernels.fm_backward(E, S, dz), E)

    def ranking(g):
        # with two fields, slots (0, j) and (1, j) tie exactly; round off the noise
        s = np.round(saliency(g), 12)
        return select_mask(s, [1, 1], 1.0).order

    g0 = slot_grads(E)
    for c in (0.1, -2.0, 7.5):
        g = slot_grads(c * E)
        np.testing.assert_allclose(g, c * c * g0, rtol=1e-12, atol=1e-14)
        assert ranking(g) == ranking(g0)


def test_draw_saliency_batches(synth_small):
    a = draw_saliency_batches(synth_small, 100, k=3, seed=4)
    b = draw_saliency_batches(synth_small, 100, k=3, seed=4)
    assert [len(x) for x in a] == [100, 100, 100]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.tokens, y.tokens)
    with pytest.raises(ConfigError):
        draw_saliency_batches(synth_small, 10, k=0)


def test_averaging_over_batches_costs_one_pass_each(rng, synth_small):
    from sseds.model import ModelConfig, init_model

    model = _trained(init_model(ModelConfig("FM", 3, (), dtype="float64"), synth_small.field_sizes, 0))
    batches = draw_saliency_batches(synth_small, 50, k=4, seed=0)
    counter = PassCounter()
    g = compute_slot_gradients(model, batches, counter)
    assert counter.forward_backward == 4
    np.testing.assert_allclose(g, sum(compute_slot_gradients(model, b) for b in batches) / 4, rtol=1e-12)


def test_prune_report_contents(rng):
    model = _trained(small_model("FM", sizes=(10, 20, 5), d=4))
    s = saliency(rng.random((3, 4)))
    pm = select_mask(s, model.field_sizes, 0.5)
    mixed = apply_mask(model, pm)
    rep = prune_report(model, s, pm, mixed, 1, ["a", "b", "c"])
    assert rep["kept_params"] <= 0.5 * rep["total_params"]
    assert rep["forward_backward_passes"] == 1
    assert rep["pruned_slots"] == 12 - int(pm.mask.sum())
    assert [f["d_i"] for f in rep["fields"]] == [len(k) for k in mixed.kept_dims]
    assert np.allclose(rep["saliency"], s)


def test_finite_difference_is_first_order(rng):
    model = _trained(small_model("FM", sizes=(5, 5, 5), d=3, seed=4))
    model.tables = [t * 4 for t in model.tables]
    model.touch()
    batch = random_batch(rng, model.field_sizes, 8)
    g = compute_slot_gradients(model, batch)
    errs = [abs(finite_diff_oracle(model, batch, 0, 1, dl) - g[0, 1]) for dl in (1e-2, 5e-3, 2.5e-3)]
    for a, b in zip(errs, errs[1:]):
        assert b / a == pytest.approx(0.5, abs=0.05)


def test_finite_difference_special_cases(rng):
    model = _trained(small_model("DeepFM", sizes=(5, 5), d=3, seed=1))
    batch = random_batch(rng, model.field_sizes, 6)
    assert finite_diff_oracle(model, batch, 1, 2, 1.0) == pytest.approx(exact_loss_change(model, batch, 1, 2))
    model.tables[0][:, 1] = 0
    model.touch()
    for dl in (1e-3, 0.5):
        assert finite_diff_oracle(model, batch, 0, 1, dl) == 0
    assert exact_loss_change(model, batch, 0, 1) == 0
