import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmmx import nam
from fedmmx.data import ModalDataset

from conftest import central_difference, random_batch, random_model

HYPER = nam.Hyperparams(lambda_consistency=0.7, lambda_interp=0.3, temperature=2.0)


def hand_model():
    layout = nam.Layout((("x", 1),), hidden=1, num_classes=2)
    p = nam.NamParams(layout)
    v = p.modality("x")
    v.w_in[0, 0] = 1.0
    v.w_out[0, 0] = [1.0, -1.0]
    return p


def test_zero_model_gives_uniform_prediction():
    layout = nam.Layout((("a", 3), ("b", 2)), hidden=4, num_classes=5)
    p = nam.NamParams(layout)
    rng = np.random.default_rng(0)
    feats = {"a": rng.normal(size=(6, 3)), "b": rng.normal(size=(6, 2))}
    logits, fused = nam.forward(p, feats, ("a", "b"))
    assert np.all(fused == 0) and all(np.all(z == 0) for z in logits.values())
    np.testing.assert_allclose(nam.softmax(fused), 0.2)
    attr = nam.attribution(p, feats, ("a", "b"))
    assert all(np.all(a == 0) for a in attr.contrib.values())
    assert all(np.all(e == 0) for e in attr.explanation.values())


def test_single_modality_fused_equals_its_logits(tiny_model):
    params, rng = tiny_model
    feats = {"a": rng.normal(size=(4, 2))}
    logits, fused = nam.forward(params, feats, ("a",))
    np.testing.assert_array_equal(fused, logits["a"])


def test_hand_evaluated_perceptron():
    p = hand_model()
    logits, fused = nam.forward(p, {"x": np.array([2.0])}, ("x",))
    np.testing.assert_array_equal(logits["x"], [2.0, -2.0])
    np.testing.assert_array_equal(fused, [2.0, -2.0])
    attr = nam.attribution(p, {"x": np.array([2.0])}, ("x",))
    np.testing.assert_array_equal(attr.contrib["x"][0], [2.0, -2.0])
    np.testing.assert_array_equal(attr.explanation["x"], [2.0, -2.0])


def test_forward_rejects_bad_inputs(tiny_model):
    params, _ = tiny_model
    with pytest.raises(KeyError):
        nam.forward(params, {"c": np.zeros(2)}, ("c",))
    with pytest.raises(ValueError):
        nam.forward(params, {"a": np.zeros(3)}, ("a",))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_additivity(seed):
    params, rng = random_model(seed, C=4, dims=(("a", 3), ("b", 5)), H=3)
    batch = random_batch(rng, params.layout, n=7)
    logits, fused = nam.forward(params, batch.features, ("a", "b"))
    attr = nam.attribution(params, batch.features, ("a", "b"))
    recon = []
    for m in ("a", "b"):
        z = params.modality(m).bias + attr.contrib[m].sum(axis=1)
        np.testing.assert_allclose(z, logits[m], atol=1e-10, rtol=0)
        np.testing.assert_allclose(attr.explanation[m] + params.modality(m).bias, logits[m], atol=1e-10, rtol=0)
        recon.append(z)
    np.testing.assert_allclose(np.mean(recon, axis=0), fused, atol=1e-10, rtol=0)


def test_softmax_sums_to_one():
    z = np.random.default_rng(1).normal(scale=30, size=(50, 6))
    np.testing.assert_allclose(nam.softmax(z).sum(axis=1), 1.0, atol=1e-12)


def test_modal_term_zero_for_one_modality(tiny_model):
    params, rng = tiny_model
    batch = random_batch(rng, params.layout, modalities=("a",))
    assert nam.loss(params, batch, ("a",), HYPER).modal == 0.0


def test_modal_term_zero_for_identical_heads():
    layout = nam.Layout((("a", 2), ("b", 2)), hidden=3, num_classes=3)
    rng = np.random.default_rng(5)
    p = nam.NamParams(layout)
    p.segment("a")[:] = rng.normal(size=p.segment("a").shape)
    p.segment("b")[:] = p.segment("a")
    x = rng.normal(size=(6, 2))
    batch = ModalDataset({"a": x, "b": x.copy()}, rng.integers(0, 3, 6))
    lb = nam.loss(p, batch, ("a", "b"), HYPER)
    assert lb.modal == pytest.approx(0.0, abs=1e-15)


def test_loss_breakdown_total():
    params, rng = random_model(3)
    batch = random_batch(rng, params.layout)
    lb = nam.loss(params, batch, ("a", "b"), HYPER)
    assert lb.pred >= 0 and lb.modal >= 0 and lb.intp >= 0
    assert lb.total == pytest.approx(lb.pred + 0.7 * lb.modal + 0.3 * lb.intp, abs=1e-12)


def test_loss_errors(tiny_model):
    params, rng = tiny_model
    with pytest.raises(ValueError):
        nam.loss(params, ModalDataset({"a": np.zeros((0, 2))}, []), ("a",), HYPER)
    with pytest.raises(ValueError):
        nam.loss(params, ModalDataset({"a": np.zeros((1, 2))}, [3]), ("a",), HYPER)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("mods", [("a", "b"), ("a",)])
def test_gradient_matches_finite_differences(seed, mods):
    params, rng = random_model(seed)
    batch = random_batch(rng, params.layout, n=6, modalities=mods)

    def total(v):
        return nam.loss(nam.NamParams(params.layout, v), batch, mods, HYPER).total

    _, grads = nam.loss_and_grad(params, batch, mods, HYPER)
    numeric = central_difference(total, params.flat)
    np.testing.assert_allclose(grads.flat, numeric, rtol=1e-4, atol=1e-7)


def test_sgd_step_arithmetic():
    layout = nam.Layout((("a", 1),), hidden=1, num_classes=2)
    p = nam.NamParams(layout, np.ones(layout.size))
    g = nam.NamParams(layout, np.full(layout.size, 0.5))
    np.testing.assert_allclose(nam.sgd_step(p, g, 0.1).flat, 0.95)
    assert nam.sgd_step(p, g, 0.0) == p
    assert nam.sgd_step(p, nam.NamParams(layout), 0.1) == p
    other = nam.NamParams(nam.Layout((("a", 2),), 1, 2))
    with pytest.raises(ValueError):
        nam.sgd_step(p, other, 0.1)


def test_flat_length_and_segments():
    dims = (("a", 3), ("b", 1), ("c", 4))
    H, C = 5, 3
    layout = nam.Layout(dims, H, C)
    assert layout.size == sum(d * (H + H + H * C) for _, d in dims) + len(dims) * C
    covered = np.zeros(layout.size, dtype=int)
    for m, _ in dims:
        covered[layout.segment(m)] += 1
    assert np.all(covered == 1)


def test_flatten_layout_order():
    layout = nam.Layout((("a", 2),), hidden=2, num_classes=3)
    p = nam.NamParams(layout, np.arange(layout.size, dtype=float))
    v = p.modality("a")
    # feature 0: w_in(2), b_hid(2), w_out(2x3); feature 1 likewise; then bias(3)
    np.testing.assert_array_equal(v.w_in[0], [0, 1])
    np.testing.assert_array_equal(v.b_hid[0], [2, 3])
    np.testing.assert_array_equal(v.w_out[0], [[4, 5, 6], [7, 8, 9]])
    np.testing.assert_array_equal(v.w_in[1], [10, 11])
    np.testing.assert_array_equal(v.bias, [20, 21, 22])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_flatten_roundtrip(seed):
    params, _ = random_model(seed, dims=(("a", 3), ("b", 2), ("c", 1)))
    back = nam.unflatten(nam.flatten(params), params.layout)
    assert back.flat.tobytes() == params.flat.tobytes()


def test_unflatten_length_mismatch():
    layout = nam.Layout((("a", 2),), 2, 2)
    with pytest.raises(ValueError):
        nam.unflatten(np.zeros(layout.size + 1), layout)


def test_snapshot_roundtrip(tmp_path):
    params, _ = random_model(11)
    path = tmp_path / "p.bin"
    nam.save_params(params, path)
    loaded = nam.load_params(path)
    assert loaded.layout == params.layout
    assert loaded.flat.tobytes() == params.flat.tobytes()
    head = path.read_bytes().split(b"\n", 1)[0]
    assert b'"hidden":4' in head


def test_init_is_bounded_and_biases_zero():
    layout = nam.Layout((("a", 4),), hidden=8, num_classes=3)
    p = nam.init_params(layout, np.random.default_rng(0))
    v = p.modality("a")
    assert np.all(np.abs(v.w_in) <= 0.5)
    assert np.all(np.abs(v.w_out) <= 0.5 / np.sqrt(8))
    assert np.all(v.b_hid == 0) and np.all(v.bias == 0)


def test_full_batch_sgd_decreases_loss():
    from fedmmx.data import SyntheticSpec, generate_dataset

    split = generate_dataset(SyntheticSpec(noise_std=0.0, num_clients=1, samples_per_client=120,
                                           modality_profile=((("vision", "text"), 1.0),)))
    batch = split.clients[0].data
    mods = ("vision", "text")
    hyper = nam.Hyperparams(lr=0.1)
    params = nam.init_params(nam.Layout(split.spec.modalities, 8, 4), np.random.default_rng(0))
    losses = []
    for _ in range(51):
        lb, g = nam.loss_and_grad(params, batch, mods, hyper)
        losses.append(lb.total)
        params = nam.sgd_step(params, g, hyper.lr)
    decreases = sum(b < a for a, b in zip(losses, losses[1:]))
    assert decreases >= 45
