import numpy as np
import pytest
import scipy.sparse as sp

from pngnn import autodiff as ad
from pngnn.autodiff import (CHECKPOINT_HEADER, CheckpointError, ParamStore,
                            StateError, Tensor, finite_diff_check,
                            load_checkpoint, mlp_forward, save_checkpoint)

RNG = np.random.default_rng(7)


def numgrad(build, x0: np.ndarray, eps=1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued build(x) at x0."""
    g = np.zeros_like(x0, dtype=np.float64)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        bump = x0.copy().reshape(-1)
        bump[i] = flat[i] + eps
        hi = build(bump.reshape(x0.shape))
        bump[i] = flat[i] - eps
        lo = build(bump.reshape(x0.shape))
        g.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return g


def check_op(make_loss, x0: np.ndarray, tol=1e-6):
    x = Tensor(x0, requires_grad=True)
    loss = make_loss(x)
    loss.backward()
    num = numgrad(lambda a: make_loss(Tensor(a)).item(), x0)
    np.testing.assert_allclose(x.grad, num, rtol=tol, atol=tol)


def weighted(t: Tensor, w: np.ndarray) -> Tensor:
    return ad.tsum(ad.mul(t, Tensor(w)))


# ------------------------------------------------------------- elementwise

def test_add_broadcast_grad():
    w = RNG.normal(size=(3, 4))
    b0 = RNG.normal(size=(4,))
    check_op(lambda x: weighted(ad.add(x, Tensor(b0)), w),
             RNG.normal(size=(3, 4)))
    # and through the broadcast side
    x0 = RNG.normal(size=(3, 4))
    check_op(lambda b: weighted(ad.add(Tensor(x0), b), w),
             RNG.normal(size=(4,)))


def test_mul_matmul_grad():
    w = RNG.normal(size=(3, 2))
    y0 = RNG.normal(size=(4, 2))
    check_op(lambda x: weighted(ad.matmul(x, Tensor(y0)), w),
             RNG.normal(size=(3, 4)))
    x0 = RNG.normal(size=(3, 4))
    check_op(lambda y: weighted(ad.matmul(Tensor(x0), y), w),
             RNG.normal(size=(4, 2)))


@pytest.mark.parametrize("op", ["relu", "sigmoid", "tanh", "logsigmoid",
                                "sqrt"])
def test_unary_grads(op):
    fn = getattr(ad, op)
    x0 = RNG.uniform(0.2, 2.0, size=(3, 3))  # positive keeps sqrt/relu smooth
    w = RNG.normal(size=(3, 3))
    check_op(lambda x: weighted(fn(x), w), x0)


def test_stable_sigmoid_logsigmoid_extremes():
    x = Tensor(np.array([-1000.0, 0.0, 1000.0]))
    s = ad.sigmoid(x).data
    ls = ad.logsigmoid(x).data
    assert np.all(np.isfinite(s)) and np.all(np.isfinite(ls))
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0], atol=1e-12)
    np.testing.assert_allclose(ls[1], np.log(0.5))
    np.testing.assert_allclose(ls[0], -1000.0)       # log sigma(x) ~ x
    assert ls[2] <= 0.0 and ls[2] > -1e-12


# -------------------------------------------------------- shape/reductions

def test_reshape_concat_slice_grads():
    w = RNG.normal(size=(2, 6))
    check_op(lambda x: weighted(ad.reshape(x, (2, 6)), w),
             RNG.normal(size=(3, 4)))
    a0 = RNG.normal(size=(2, 2))
    w2 = RNG.normal(size=(2, 5))
    check_op(lambda x: weighted(ad.concat([x, Tensor(a0)], axis=1), w2),
             RNG.normal(size=(2, 3)))
    w3 = RNG.normal(size=(2, 2))
    check_op(lambda x: weighted(ad.slice_cols(x, 1, 3), w3),
             RNG.normal(size=(2, 4)))


def test_sum_mean_max_grads():
    w = RNG.normal(size=(3,))
    check_op(lambda x: weighted(ad.tsum(x, axis=1), w),
             RNG.normal(size=(3, 4)))
    check_op(lambda x: weighted(ad.tmean(x, axis=1), w),
             RNG.normal(size=(3, 4)))
    x0 = RNG.normal(size=(3, 4))
    x0 += np.linspace(0, 1, 12).reshape(3, 4)  # break exact ties
    check_op(lambda x: weighted(ad.tmax(x, axis=1), w), x0)


def test_tmax_tie_goes_to_first():
    x = Tensor(np.array([[1.0, 1.0, 0.0]]), requires_grad=True)
    ad.tsum(ad.tmax(x, axis=1)).backward()
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])


# ---------------------------------------------------------- gather/scatter

def test_gather_scatter_grads():
    idx = np.array([2, 0, 2, 1])
    w = RNG.normal(size=(4, 3))
    check_op(lambda x: weighted(ad.gather_rows(x, idx), w),
             RNG.normal(size=(3, 3)))
    w2 = RNG.normal(size=(5, 3))
    check_op(lambda x: weighted(ad.scatter_add_rows(x, idx, 5), w2),
             RNG.normal(size=(4, 3)))


def test_scatter_accumulates_duplicates():
    x = Tensor(np.ones((3, 2)))
    out = ad.scatter_add_rows(x, np.array([1, 1, 0]), 3).data
    np.testing.assert_array_equal(out, [[1, 1], [2, 2], [0, 0]])


# ------------------------------------------------------------ segment ops

SEG_INDPTR = np.array([0, 2, 2, 5])  # segment 1 empty


@pytest.mark.parametrize("name", ["segment_sum", "segment_mean",
                                  "segment_max", "segment_min"])
def test_segment_grads(name):
    fn = getattr(ad, name)
    x0 = RNG.normal(size=(5, 3))
    x0 += np.linspace(0, 1, 15).reshape(5, 3)
    w = RNG.normal(size=(3, 3))
    check_op(lambda x: weighted(fn(x, SEG_INDPTR), w), x0)


def test_segment_empty_rows_are_zero():
    x = Tensor(RNG.normal(size=(5, 3)))
    for name in ("segment_sum", "segment_mean", "segment_max", "segment_min"):
        out = getattr(ad, name)(x, SEG_INDPTR).data
        np.testing.assert_array_equal(out[1], np.zeros(3))


def test_segment_sum_matches_reduceat():
    x = RNG.normal(size=(6, 2))
    indptr = np.array([0, 3, 4, 6])
    out = ad.segment_sum(Tensor(x), indptr).data
    expect = np.stack([x[0:3].sum(0), x[3:4].sum(0), x[4:6].sum(0)])
    np.testing.assert_allclose(out, expect)


# ------------------------------------------------------- structured kernels

def test_rotate_pairs_preserves_norm_and_grad():
    x0 = RNG.normal(size=(4, 6))
    th0 = RNG.normal(size=(4, 3))
    out = ad.rotate_pairs(Tensor(x0), Tensor(th0)).data
    norms = (x0[:, 0::2] ** 2 + x0[:, 1::2] ** 2)
    norms_out = (out[:, 0::2] ** 2 + out[:, 1::2] ** 2)
    np.testing.assert_allclose(norms, norms_out, rtol=1e-12)
    w = RNG.normal(size=(4, 6))
    check_op(lambda x: weighted(ad.rotate_pairs(x, Tensor(th0)), w), x0)
    check_op(lambda th: weighted(ad.rotate_pairs(Tensor(x0), th), w), th0)


def test_spmm_grad():
    mat = sp.csr_matrix(np.array([[1.0, 0, 1], [0, 2, 0]]))
    mat_t = sp.csr_matrix(mat.T.toarray())
    w = RNG.normal(size=(2, 2))
    check_op(lambda x: weighted(ad.spmm(mat, mat_t, x), w),
             RNG.normal(size=(3, 2)))


def test_layer_norm_grad_and_normalization():
    x0 = RNG.normal(size=(3, 8)) * 3 + 1
    gain0 = np.ones(8)
    bias0 = np.zeros(8)
    out = ad.layer_norm(Tensor(x0), Tensor(gain0), Tensor(bias0)).data
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-4)
    w = RNG.normal(size=(3, 8))
    check_op(lambda x: weighted(
        ad.layer_norm(x, Tensor(gain0), Tensor(bias0)), w), x0, tol=1e-5)
    check_op(lambda g: weighted(
        ad.layer_norm(Tensor(x0), g, Tensor(bias0)), w), RNG.normal(size=(8,)),
        tol=1e-5)


@pytest.mark.parametrize("message", ["translate", "multiply", "rotate"])
def test_relational_aggregate_matches_loop(message):
    num_rows, d = 4, 6
    src = np.array([0, 1, 1, 3])
    rel = np.array([0, 1, 0, 1])
    dst = np.array([1, 2, 2, 0])
    h0 = RNG.normal(size=(num_rows, d))
    zw = d // 2 if message == "rotate" else d
    z0 = RNG.normal(size=(2, zw))
    out = ad.relational_aggregate(Tensor(h0), Tensor(z0), src, rel, dst,
                                  num_rows, message).data
    expect = np.zeros((num_rows, d))
    for s, r, t in zip(src, rel, dst):
        if message == "translate":
            m = h0[s] + z0[r]
        elif message == "multiply":
            m = h0[s] * z0[r]
        else:
            m = np.empty(d)
            cos, sin = np.cos(z0[r]), np.sin(z0[r])
            m[0::2] = h0[s, 0::2] * cos - h0[s, 1::2] * sin
            m[1::2] = h0[s, 0::2] * sin + h0[s, 1::2] * cos
        expect[t] += m
    np.testing.assert_allclose(out, expect, rtol=1e-12)


@pytest.mark.parametrize("message", ["translate", "multiply", "rotate"])
def test_relational_aggregate_grad(message):
    src = np.array([0, 1, 1, 3])
    rel = np.array([0, 1, 0, 1])
    dst = np.array([1, 2, 2, 0])
    d = 6
    zw = d // 2 if message == "rotate" else d
    h0 = RNG.normal(size=(4, d))
    z0 = RNG.normal(size=(2, zw))
    w = RNG.normal(size=(4, d))
    check_op(lambda h: weighted(ad.relational_aggregate(
        h, Tensor(z0), src, rel, dst, 4, message), w), h0, tol=1e-5)
    check_op(lambda z: weighted(ad.relational_aggregate(
        Tensor(h0), z, src, rel, dst, 4, message), w), z0, tol=1e-5)


# -------------------------------------------------------------- ParamStore

def test_store_deterministic_and_shape_checked():
    s1 = ParamStore.seeded(3)
    s2 = ParamStore.seeded(3)
    a = s1.get("w", (3, 3), fan_in=3)
    b = s2.get("w", (3, 3), fan_in=3)
    np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(StateError):
        s1.get("w", (2, 3), fan_in=3)
    with pytest.raises(StateError):
        s1.get("v", (2,), init="nope")


def test_init_modes():
    s = ParamStore.seeded(0)
    np.testing.assert_array_equal(s.get("g", (4,), init="ones").data,
                                  np.ones(4))
    np.testing.assert_array_equal(s.get("b", (4,), init="zeros").data,
                                  np.zeros(4))
    u = s.get("w", (4, 4), fan_in=4).data
    assert np.all(np.abs(u) <= 1 / np.sqrt(4))


def test_adam_requires_all_grads():
    s = ParamStore.seeded(0)
    x = s.get("a", (2,))
    s.get("unused", (2,))
    ad.tsum(ad.mul(x, x)).backward()
    with pytest.raises(StateError, match="unused"):
        s.adam_step(1e-2)


def test_adam_step_descends():
    s = ParamStore.seeded(1)
    for _ in range(200):
        x = s.get("x", (4,))
        loss = ad.tsum(ad.mul(x, x))
        loss.backward()
        s.adam_step(5e-2)
    assert float(np.abs(s.params["x"].data).max()) < 1e-3


def test_mlp_forward_shapes_and_params():
    s = ParamStore.seeded(0)
    x = Tensor(RNG.normal(size=(5, 4)))
    out = mlp_forward(s, "mlp", x, [4, 8, 2])
    assert out.shape == (5, 2)
    assert {"mlp.w0", "mlp.b0", "mlp.w1", "mlp.b1"} <= set(s.params)


# ------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_bitwise(tmp_path):
    s = ParamStore.seeded(5)
    x = s.get("w", (3, 3), fan_in=3)
    ad.tsum(ad.mul(x, x)).backward()
    s.adam_step(1e-3)
    path = str(tmp_path / "c.ckpt")
    save_checkpoint(path, s, {"note": "x"})
    back, meta = load_checkpoint(path)
    assert meta["note"] == "x"
    np.testing.assert_array_equal(back.params["w"].data, s.params["w"].data)
    np.testing.assert_array_equal(back.adam_m["w"], s.adam_m["w"])
    np.testing.assert_array_equal(back.adam_v["w"], s.adam_v["w"])
    assert back.step_count == s.step_count


def test_checkpoint_bad_header_and_truncation(tmp_path):
    path = str(tmp_path / "c.ckpt")
    s = ParamStore.seeded(0)
    s.get("w", (2, 2))
    save_checkpoint(path, s, {})
    raw = open(path, "rb").read()
    assert raw.startswith(CHECKPOINT_HEADER)
    bad = str(tmp_path / "bad.ckpt")
    open(bad, "wb").write(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    trunc = str(tmp_path / "trunc.ckpt")
    open(trunc, "wb").write(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(trunc)


# --------------------------------------------------------- finite_diff_check

def test_finite_diff_check_passes_smooth_loss():
    store = ParamStore.seeded(11)

    def loss_fn() -> Tensor:
        w = store.get("w", (4, 4), fan_in=4)
        b = store.get("b", (4,))
        h = ad.tanh(ad.add(ad.matmul(w, w), b))
        return ad.tsum(ad.mul(h, h))

    rep = finite_diff_check(loss_fn, store, np.random.default_rng(0),
                            num_coords=60)
    assert rep.passed, rep
    assert rep.max_rel_err < 1e-4
    assert rep.num_checked == 20  # every coordinate of w (16) and b (4)
