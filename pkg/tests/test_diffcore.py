import math

import numpy as np
import pytest
from scipy import stats

from backend.core.diffcore import (
    AdamConfig,
    NetworkSpec,
    ParamStore,
    Tape,
    adam_step,
    adam_update,
    backward,
    clip_by_global_norm,
    concat,
    forward,
    gaussian_kl,
    gaussian_logpdf,
    global_norm,
    gradient_check,
    init_network,
)
from backend.core.errors import NonFiniteError, ShapeError, TapeError
from backend.core.models import FlowPrior, ForwardCvae, ForwardMlp, InverseCvae, TrainConfig


def _identity_net(dim=3):
    net = NetworkSpec("id", (dim, dim), "identity")
    params = ParamStore()
    params.add("id.W0", np.eye(dim))
    params.add("id.b0", np.zeros(dim))
    return net, params


def test_identity_layer_passes_input_through():
    net, params = _identity_net()
    x = np.array([[1.0, -2.0, 0.5], [3.0, 0.0, 4.0]])
    out, _ = forward(net, params, x)
    np.testing.assert_array_equal(out.value, x)


def test_relu_values():
    tape = Tape()
    v = tape.input([-1.0, 2.0])
    assert v.relu().value.tolist() == [0.0, 2.0]


def test_two_layer_net_matches_matrix_arithmetic(rng):
    net = NetworkSpec("n", (4, 7, 3), "relu")
    params = ParamStore()
    init_network(net, params, rng)
    params.set("n.b0", rng.standard_normal(7))
    params.set("n.b1", rng.standard_normal(3))
    x = rng.standard_normal((5, 4))
    out, _ = forward(net, params, x)
    hidden = np.maximum(x @ params["n.W0"] + params["n.b0"], 0.0)
    np.testing.assert_allclose(out.value, hidden @ params["n.W1"] + params["n.b1"], rtol=0, atol=1e-12)


def test_forward_rejects_wrong_width():
    net, params = _identity_net()
    with pytest.raises(ShapeError):
        forward(net, params, np.zeros((2, 4)))


def test_network_spec_checks_heads():
    with pytest.raises(ShapeError):
        NetworkSpec("h", (3, 4), heads=(2, 3))


def test_sum_loss_weight_gradient_is_input_sum():
    net, params = _identity_net()
    x = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    out, tape = forward(net, params, x)
    backward(tape, out.sum())
    np.testing.assert_allclose(params.grads["id.W0"], np.outer(x.sum(axis=0), np.ones(3)))
    np.testing.assert_allclose(params.grads["id.b0"], [2.0, 2.0, 2.0])


def test_zero_output_grad_gives_zero_gradients():
    net, params = _identity_net()
    out, tape = forward(net, params, np.ones((2, 3)))
    backward(tape, out.sum(), output_grad=0.0)
    assert all(not g.any() for g in params.grads.values())


def test_tape_is_single_use_and_pinned_to_parameters():
    net, params = _identity_net()
    out, tape = forward(net, params, np.ones((1, 3)))
    loss = out.sum()
    backward(tape, loss)
    with pytest.raises(TapeError):
        backward(tape, loss)

    out, tape = forward(net, params, np.ones((1, 3)))
    params.set("id.b0", np.ones(3))
    with pytest.raises(TapeError, match="changed"):
        backward(tape, out.sum())


def test_values_from_different_tapes_do_not_mix():
    a = Tape().input([1.0])
    b = Tape().input([2.0])
    with pytest.raises(TapeError):
        a + b


def test_fancy_index_accumulates():
    tape = Tape()
    v = tape.input([1.0, 2.0, 3.0])
    backward(tape, v[[0, 0, 2]].sum())
    assert v.grad.tolist() == [2.0, 0.0, 1.0]


def test_input_gradients_through_concat():
    tape = Tape()
    a = tape.input([[1.0, 2.0]])
    b = tape.input([[3.0]])
    backward(tape, (concat([a, b], axis=1).square()).sum())
    assert a.grad.tolist() == [[2.0, 4.0]]
    assert b.grad.tolist() == [[6.0]]


def _check(loss_fn, params=None, inputs=None):
    return gradient_check(loss_fn, params, inputs, h=1e-5, max_entries=25, rng=np.random.default_rng(0))


def test_gradcheck_forward_mlp(rng):
    model = ForwardMlp(4, 3, hidden=6)
    model.init_params(rng)
    x, y = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
    assert _check(lambda tape, _: model.loss(tape, x, y, None, TrainConfig()), model.params) < 1e-4


def test_gradcheck_inverse_cvae_elbo(rng):
    model = InverseCvae(4, 3, hidden=6, latent_dim=2)
    model.init_params(rng)
    x, y = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
    loss = lambda tape, _: model.loss(tape, x, y, np.random.default_rng(3), TrainConfig())  # noqa: E731
    assert _check(loss, model.params) < 1e-4


def test_gradcheck_forward_cvae_elbo(rng):
    model = ForwardCvae(4, 3, hidden=6, latent_dim=2)
    model.init_params(rng)
    x, y = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
    loss = lambda tape, _: model.loss(tape, x, y, np.random.default_rng(3), TrainConfig())  # noqa: E731
    assert _check(loss, model.params) < 1e-4


def test_gradcheck_flow_coupling_nets(rng):
    flow = FlowPrior(4, hidden=5, n_layers=4)
    flow.init_params(rng)
    for name in flow.params.names():
        flow.params.set(name, flow.params[name] + 0.2 * rng.standard_normal(flow.params[name].shape))
    y = rng.standard_normal((6, 4))
    loss = lambda tape, v: -flow.logprob(tape, v["y"]).mean()  # noqa: E731
    assert _check(loss, flow.params, {"y": y}) < 1e-4


def test_gradcheck_gaussian_primitives(rng):
    inputs = {name: rng.standard_normal((3, 4)) * 0.5 for name in ("x", "m", "s", "mp", "sp")}

    def loss(tape, v):
        return (gaussian_logpdf(v["x"], v["m"], v["s"]) + gaussian_kl(v["m"], v["s"], v["mp"], v["sp"])).sum()

    assert _check(loss, inputs=inputs) < 1e-4


def test_gaussian_logpdf_values(rng):
    tape = Tape()
    x = tape.input([[0.0]])
    assert gaussian_logpdf(x, 0.0, 0.0).value[0] == pytest.approx(-0.9189385332046727, abs=1e-12)
    d = 5
    x = tape.input(np.full((1, d), 0.3))
    assert gaussian_logpdf(x, 0.3, 0.0).value[0] == pytest.approx(-d * 0.9189385332046727, abs=1e-12)

    xs, mu, ls = rng.standard_normal((4, 6)), rng.standard_normal((4, 6)), 0.3 * rng.standard_normal((4, 6))
    got = gaussian_logpdf(tape.input(xs), mu, ls).value
    ref = stats.norm.logpdf(xs, loc=mu, scale=np.exp(ls)).sum(axis=1)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_gaussian_kl_closed_form(rng):
    tape = Tape()
    mq, lq = rng.standard_normal((3, 2)), 0.2 * rng.standard_normal((3, 2))
    mp, lp = rng.standard_normal((3, 2)), 0.2 * rng.standard_normal((3, 2))
    got = gaussian_kl(tape.input(mq), lq, mp, lp).value
    sq, sp = np.exp(lq), np.exp(lp)
    ref = np.sum(np.log(sp / sq) + (sq**2 + (mq - mp) ** 2) / (2 * sp**2) - 0.5, axis=1)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)
    same = gaussian_kl(tape.input(mq), lq, mq, lq).value
    np.testing.assert_allclose(same, 0.0, atol=1e-12)


@pytest.mark.parametrize(
    "mq, sq, mp, sp",
    [
        ([0.5, 0.0, -1.0], [0.5, 1.5, 1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]),
        ([0.3, -0.5], [0.8, 1.3], [0.1, 0.2], [1.0, 0.7]),
    ],
    ids=["standard-normal-prior", "learned-prior"],
)
def test_gaussian_kl_matches_monte_carlo(mq, sq, mp, sp):
    mq, sq, mp, sp = (np.array(v) for v in (mq, sq, mp, sp))
    tape = Tape()
    closed = float(gaussian_kl(tape.input(mq[None, :]), np.log(sq), mp, np.log(sp)).value[0])
    z = mq + sq * np.random.default_rng(11).standard_normal((100_000, mq.size))
    log_ratio = stats.norm.logpdf(z, mq, sq).sum(axis=1) - stats.norm.logpdf(z, mp, sp).sum(axis=1)
    assert log_ratio.mean() == pytest.approx(closed, rel=0.02)


def test_gradient_check_flags_a_wrong_gradient(rng):
    x = rng.uniform(0.5, 1.5, size=(2, 3))

    def loss(tape, v):
        # the constant term shifts the numeric gradient by 2e-2 * x without touching the tape
        return (v["x"] * 1.0).sum() + tape.constant(1e-2 * np.sum(v["x"].value ** 2))

    assert gradient_check(loss, inputs={"x": x}) > 1e-3

    def tiny(tape, v):
        return (v["x"] * 1e-6).sum() + tape.constant(1e-8 * np.sum(v["x"].value))

    # below the floor errors are measured on the absolute 1e-4 scale
    assert gradient_check(tiny, inputs={"x": x}) == pytest.approx(1e-4, rel=1e-3)
    assert gradient_check(tiny, inputs={"x": x}, floor=0.0) == pytest.approx(1e-2 / 1.01, rel=1e-3)


def test_clip_by_global_norm():
    grads = {"a": np.array([6.0, 8.0])}
    assert clip_by_global_norm(grads, 5.0) == pytest.approx(10.0)
    assert global_norm(grads.values()) == pytest.approx(5.0, abs=1e-12)

    small = {"a": np.array([1.0, 2.0]), "b": np.array([[2.0]])}
    before = {k: v.copy() for k, v in small.items()}
    clip_by_global_norm(small, 5.0)
    for k in small:
        np.testing.assert_array_equal(small[k], before[k])


def test_adam_first_step_moves_by_lr():
    params = ParamStore()
    params.add("w", [1.0, -2.0, 3.0])
    params.grads["w"][:] = [1e-3, 50.0, -7.0]
    lr = 0.01
    adam_step(params, AdamConfig(lr=lr))
    delta = np.abs(params["w"] - np.array([1.0, -2.0, 3.0]))
    assert np.all(delta <= lr * (1 + 1e-6))
    assert np.all(delta >= lr * 0.99)
    assert params.step == 1


def test_adam_step_reports_and_clips_norm():
    params = ParamStore()
    params.add("w", [0.0, 0.0])
    params.grads["w"][:] = [6.0, 8.0]
    norm = adam_step(params, AdamConfig(lr=0.1, clip_norm=5.0))
    assert norm == pytest.approx(10.0)
    assert global_norm(params.grads.values()) == pytest.approx(5.0, abs=1e-12)


def test_adam_rejects_non_finite_gradient():
    params = ParamStore()
    params.add("enc.W0", [1.0])
    params.grads["enc.W0"][:] = [math.nan]
    with pytest.raises(NonFiniteError, match="enc.W0"):
        adam_step(params, AdamConfig())


def test_adam_quadratic_bowl():
    x, m, v = np.array([1.0]), np.zeros(1), np.zeros(1)
    cfg = AdamConfig(lr=0.05)
    for step in range(1, 501):
        x, m, v = adam_update(x, 2.0 * x, m, v, step, cfg)
    assert abs(x[0]) < 1e-3


def test_param_store_flat_manifest_checks_length():
    store = ParamStore()
    store.add("a", np.arange(6.0).reshape(2, 3))
    store.add("b", [7.0])
    restored = ParamStore.from_flat(store.flatten(), store.manifest())
    assert restored.shapes() == {"a": (2, 3), "b": (1,)}
    with pytest.raises(ShapeError, match="trailing"):
        ParamStore.from_flat(np.zeros(8), store.manifest())
    with pytest.raises(ShapeError, match="too short"):
        ParamStore.from_flat(np.zeros(3), store.manifest())


def test_param_store_rejects_duplicates_and_bad_shapes():
    store = ParamStore()
    store.add("a", [1.0, 2.0])
    with pytest.raises(ShapeError):
        store.add("a", [0.0])
    with pytest.raises(ShapeError):
        store.set("a", [1.0])
