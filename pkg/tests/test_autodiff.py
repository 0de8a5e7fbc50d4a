"""Engine tests: forward values, backward gradients against central
differences, optimizer behavior, and the checkpoint format."""

import numpy as np
import pytest

from contour_forge import autodiff as ad
from contour_forge import gradcheck as gc


def test_backward_of_sum_is_ones():
    x = ad.Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    ad.backward(x.sum())
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(x * 2.0)


def test_backward_accumulates_shared_inputs():
    x = ad.Tensor(np.array(2.0), requires_grad=True)
    y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
    ad.backward(y)
    assert float(x.grad) == pytest.approx(7.0)


def test_gelu_zero_is_exact():
    assert float(ad.gelu(ad.Tensor(np.array(0.0))).data) == 0.0


def test_layer_norm_constant_vector_is_zero():
    out = ad.layer_norm(ad.Tensor(np.full((6,), 4.2)))
    assert np.allclose(out.data, 0.0)


def test_bilinear_sample_at_grid_node():
    g = ad.Tensor(np.arange(24, dtype=float).reshape(2, 3, 4))
    out = ad.bilinear_sample(g, np.array([[2.0, 1.0]]))
    assert np.array_equal(out.data[0], g.data[:, 1, 2])


def test_bilinear_sample_clamps_to_border():
    g = ad.Tensor(np.arange(12, dtype=float).reshape(1, 3, 4))
    out = ad.bilinear_sample(g, np.array([[-5.0, -5.0], [99.0, 99.0]]))
    assert out.data[0, 0] == g.data[0, 0, 0]
    assert out.data[1, 0] == g.data[0, 2, 3]


def test_bilinear_sample_linear_in_grid():
    rng = np.random.default_rng(4)
    g1 = rng.normal(size=(3, 5, 6))
    g2 = rng.normal(size=(3, 5, 6))
    coords = np.stack([rng.uniform(0, 5, 8), rng.uniform(0, 4, 8)], axis=1)
    a, b = 0.37, -1.21
    mixed = ad.bilinear_sample(ad.Tensor(a * g1 + b * g2), coords).data
    parts = a * ad.bilinear_sample(ad.Tensor(g1), coords).data \
        + b * ad.bilinear_sample(ad.Tensor(g2), coords).data
    assert np.abs(mixed - parts).max() < 1e-10


def test_dropout_eval_is_identity():
    x = ad.Tensor(np.random.default_rng(0).normal(size=(4, 4)), requires_grad=True)
    out = ad.dropout(x, 0.5, train=False)
    assert np.array_equal(out.data, x.data)


def test_dropout_train_needs_rng_and_scales():
    x = ad.Tensor(np.ones((1000,)))
    with pytest.raises(ValueError):
        ad.dropout(x, 0.5, train=True)
    out = ad.dropout(x, 0.5, train=True, rng=np.random.default_rng(0))
    kept = out.data[out.data > 0]
    assert np.allclose(kept, 2.0)  # inverted scaling


def test_shape_errors_name_op_and_shapes():
    a = ad.Tensor(np.ones((2, 3)))
    b = ad.Tensor(np.ones((2, 3)))
    with pytest.raises(ValueError, match=r"matmul.*2, 3.*2, 3"):
        a @ b


def test_backward_rerun_is_bit_identical():
    def run():
        rng = np.random.default_rng(77)
        x = ad.Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        w = ad.Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        loss = (ad.gelu(x @ w)).mean() + ad.softmax(x, axis=1).sum() * 0.1
        ad.backward(loss)
        return x.grad.copy(), w.grad.copy()

    gx1, gw1 = run()
    gx2, gw2 = run()
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


def test_representative_primitive_gradients():
    # the full registry runs in the acceptance suite; spot-check a few here
    for name in ("mul", "matmul", "gelu", "softmax", "bilinear_sample", "huber"):
        rng = np.random.default_rng(10)
        err = gc.PRIMITIVE_CHECKS[name](rng)
        assert err < 1e-4, f"{name}: {err}"


def test_gradcheck_registry_catches_broken_backward():
    def broken_check(rng):
        def make(rng):
            a = ad.Tensor(rng.uniform(-1, 1, (3,)), requires_grad=True)

            def forward():
                out = ad.texp(a)
                out._vjp = lambda g: (g * out.data * 1.05,)  # wrong by 5%
                return out.sum()

            return {"a": a}, forward

        return gc.fd_check(make, rng)

    report = gc.run_all(seed=0, registry={"broken": broken_check})
    assert not report["broken"]["passed"]
    assert not report["_summary"]["all_passed"]


# --- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = ad.Adam({"p": p}, lr=0.1)
    p.grad = np.zeros(2)
    before = p.data.copy()
    for _ in range(3):
        opt.step()
    assert np.abs(p.data - before).max() < 1e-12


def test_adam_first_step_magnitude():
    p = ad.Tensor(np.array(1.0), requires_grad=True)
    opt = ad.Adam({"p": p}, lr=0.1)
    p.grad = np.array(1.0)
    opt.step()
    # bias-corrected first step is lr * g / (|g| + eps) = ~lr
    assert float(p.data) == pytest.approx(0.9, abs=1e-6)


def test_adam_deterministic_runs():
    def run():
        rng = np.random.default_rng(3)
        params = {f"p{i}": ad.Tensor(rng.normal(size=(4,)), requires_grad=True)
                  for i in range(3)}
        opt = ad.Adam(params, lr=0.01)
        for step in range(10):
            g_rng = np.random.default_rng(step)
            for p in params.values():
                p.grad = g_rng.normal(size=(4,))
            opt.step()
        return {k: p.data.copy() for k, p in params.items()}

    r1, r2 = run(), run()
    assert all(np.array_equal(r1[k], r2[k]) for k in r1)


def test_adam_nan_gradient_aborts():
    p = ad.Tensor(np.array(1.0), requires_grad=True)
    opt = ad.Adam({"p": p}, lr=0.1)
    p.grad = np.array(np.nan)
    with pytest.raises(ad.NumericalError, match="p"):
        opt.step()


# --- checkpoints ---------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    params = {
        "a/w": ad.Tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True),
        "b": ad.Tensor(rng.normal(size=(5,)).astype(np.float32), requires_grad=True),
    }
    opt = ad.Adam(params, lr=0.01)
    for p in params.values():
        p.grad = np.ones_like(p.data)
    opt.step()
    path = tmp_path / "ck.bin"
    ad.save_checkpoint(path, params, {"note": 1}, step=17, optimizer=opt)

    ck = ad.load_checkpoint(path)
    assert ck.step == 17 and ck.config == {"note": 1}
    for k, p in params.items():
        assert np.array_equal(ck.params()[k], p.data)
    assert ck.optimizer_meta == {"t": 1}
    assert set(ck.optimizer_arrays()) == {"adam_m/a/w", "adam_m/b", "adam_v/a/w", "adam_v/b"}


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        ad.load_checkpoint(path)
