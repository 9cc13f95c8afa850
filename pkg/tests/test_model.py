import itertools

import numpy as np
import pytest

from sseds.dataio import Batch
from sseds.errors import ConfigError, DataError, NumericalError
from sseds.model import (
    AdamState,
    CTRModel,
    ModelConfig,
    adam_step,
    backward,
    forward,
    init_model,
    loss,
    sigmoid,
    train,
)

from conftest import random_batch, small_model


def _fd_check(model: CTRModel, batch: Batch, eps=1e-6, rtol=1e-5, atol=1e-7):
    p, trace = forward(model, batch)
    grads = backward(model, batch, trace).to_dense(model)
    rng = np.random.default_rng(0)
    for name, param in model.named_parameters():
        flat = param.reshape(-1)
        picks = rng.choice(flat.size, size=min(flat.size, 6), replace=False)
        for k in picks:
            old = flat[k]
            flat[k] = old + eps
            lp = loss(forward(model, batch)[0], batch.labels)
            flat[k] = old - eps
            lm = loss(forward(model, batch)[0], batch.labels)
            flat[k] = old
            num = (lp - lm) / (2 * eps)
            got = grads[name].reshape(-1)[k]
            assert abs(num - got) <= atol + rtol * abs(num), (name, k, num, got)
        model.touch()


@pytest.mark.parametrize("arch, fusion", [("FM", "sum"), ("WideDeep", "sum"), ("DeepFM", "sum"),
                                          ("DeepFM", "concat")])
def test_backward_matches_finite_differences(arch, fusion, rng):
    model = small_model(arch, fusion=fusion, seed=3)
    batch = random_batch(rng, model.field_sizes, 16)
    _fd_check(model, batch)


def test_backward_with_transforms_and_mixed_widths(rng):
    from sseds.pruning import PruneMask, apply_mask
    from sseds.slim import SlimOptions, build_slim

    base = small_model("DeepFM", sizes=(6, 5, 7), d=4, seed=1)
    mask = np.array([[1, 1, 1, 0], [0, 1, 0, 0], [1, 0, 0, 1]], dtype=bool)
    mixed = apply_mask(base, PruneMask(mask, None, 1.0, 0, 0, 0))
    slim, _ = build_slim(mixed, base, SlimOptions(), seed=2)
    assert slim.dims == [3, 1, 2]
    _fd_check(slim, random_batch(rng, base.field_sizes, 12))


def test_fm_term_matches_pairwise_oracle(rng):
    model = small_model("FM", sizes=(4, 6, 5, 3), d=3, seed=2)
    batch = random_batch(rng, model.field_sizes, 10)
    _, trace = forward(model, batch)
    X = batch.tokens
    want = np.zeros(10)
    for a, b in itertools.combinations(range(4), 2):
        want += (model.tables[a][X[:, a]] * model.tables[b][X[:, b]]).sum(axis=1)
    np.testing.assert_allclose(trace.fm, want, rtol=1e-12, atol=1e-14)
    z = want + model.bias[0] + sum(model.linear[i][X[:, i]] for i in range(4))
    np.testing.assert_allclose(trace.z, z, rtol=1e-12)


def test_loss_hand_values():
    p = np.array([0.5, 0.9])
    y = np.array([1, 0])
    want = -np.log(0.5) - np.log(0.1)
    assert loss(p, y) == pytest.approx(want, rel=1e-12)
    assert loss(p, y, "mean") == pytest.approx(want / 2, rel=1e-12)


def test_sigmoid_is_stable():
    z = np.array([-800.0, 0.0, 800.0])
    out = sigmoid(z)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_probabilities_are_clamped(rng):
    model = small_model("FM", seed=0)
    model.bias[:] = 60.0
    p, _ = forward(model, random_batch(rng, model.field_sizes, 5))
    assert p.max() < 1.0 and np.isfinite(loss(p, np.zeros(5)))


def test_stale_trace_rejected(rng):
    model = small_model("FM")
    batch = random_batch(rng, model.field_sizes, 4)
    _, trace = forward(model, batch)
    model.touch()
    with pytest.raises(NumericalError, match="stale"):
        backward(model, batch, trace)
    _, trace = forward(model, batch)
    other = random_batch(np.random.default_rng(99), model.field_sizes, 4)
    with pytest.raises(NumericalError, match="stale"):
        backward(model, other, trace)


def test_blowup_raises(rng):
    model = small_model("FM")
    model.tables[0][:] = np.inf
    with pytest.raises(NumericalError, match="blowup"):
        forward(model, random_batch(rng, model.field_sizes, 3))


def test_out_of_range_token(rng):
    model = small_model("FM", sizes=(3, 3, 3))
    batch = Batch(np.array([[0, 1, 3]]), np.array([1], np.uint8), 0)
    with pytest.raises(DataError):
        forward(model, batch)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig("Transformer")
    with pytest.raises(ConfigError):
        ModelConfig(fusion="product")
    with pytest.raises(ConfigError):
        ModelConfig(d=0)


def test_init_shapes_and_ranges():
    cfg = ModelConfig("DeepFM", 16, (32, 8))
    m = init_model(cfg, [10, 20, 30], seed=0)
    assert [t.shape for t in m.tables] == [(10, 16), (20, 16), (30, 16)]
    assert all(np.abs(t).max() <= 0.25 for t in m.tables)
    assert [w.shape for w in m.mlp_w] == [(48, 32), (32, 8), (8, 1)]
    assert m.tables[0].dtype == np.float32


# ---------------------------------------------------------------- Adam


def _reference_adam(p, g, m, v, t, lr=0.01, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    return p - lr * mhat / (np.sqrt(vhat) + eps), m, v


def test_adam_matches_reference_and_is_lazy(rng):
    model = small_model("DeepFM", sizes=(20, 5, 9), seed=4)
    state = AdamState(lr=0.01)
    ref = {n: (p.copy(), np.zeros_like(p), np.zeros_like(p)) for n, p in model.named_parameters()}
    batch = random_batch(rng, model.field_sizes, 6)
    for t in (1, 2, 3):
        _, trace = forward(model, batch)
        grads = backward(model, batch, trace)
        dense = grads.to_dense(model)
        touched = {f"V/{i}": rows for i, (rows, _) in enumerate(grads.tables)}
        touched.update({f"w/{i}": rows for i, (rows, _) in enumerate(grads.linear)})
        for name, (p, m, v) in ref.items():
            new_p, new_m, new_v = _reference_adam(p, dense[name], m, v, t)
            if name in touched:
                keep = np.setdiff1d(np.arange(p.shape[0]), touched[name])
                new_p[keep], new_m[keep], new_v[keep] = p[keep], m[keep], v[keep]
            ref[name] = (new_p, new_m, new_v)
        adam_step(model, grads, state)
    for name, p in model.named_parameters():
        np.testing.assert_allclose(p, ref[name][0], rtol=1e-12, atol=1e-15, err_msg=name)
    untouched = np.setdiff1d(np.arange(20), batch.tokens[:, 0])
    assert len(untouched) > 0
    np.testing.assert_array_equal(state.m["V/0"][untouched], 0)


def test_training_reduces_loss_and_is_deterministic(synth_small):
    cfg = ModelConfig("DeepFM", 4, (8,), dtype="float32")

    def run():
        m = init_model(cfg, synth_small.field_sizes, seed=1)
        hist, _ = train(m, synth_small, synth_small, 3, 128, 0.01, seed=2)
        return m, hist

    a, ha = run()
    b, hb = run()
    assert ha[-1]["train_loss"] < ha[0]["train_loss"]
    assert ha == hb
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert p.tobytes() == q.tobytes(), n
    assert a.step == 3 * int(np.ceil(len(synth_small) / 128))


def test_zero_epochs_is_a_noop(synth_small):
    m = init_model(ModelConfig("FM", 4, ()), synth_small.field_sizes, seed=0)
    before = m.copy()
    hist, _ = train(m, synth_small, None, 0)
    assert hist == []
    for (_, p), (_, q) in zip(m.named_parameters(), before.named_parameters()):
        np.testing.assert_array_equal(p, q)
