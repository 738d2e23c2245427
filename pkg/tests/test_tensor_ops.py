"""Forward semantics of the tensor ops, mostly against direct-loop oracles."""
import numpy as np
import pytest

from pfvsr import tensor as T
from pfvsr.tensor import (GradientTape, ShapeError, Tensor, add, backward,
                          concat_channels, conv2d, downsample, leaky_relu,
                          load_tensor, mean_all, mul, pixel_shuffle,
                          pixel_unshuffle, save_tensor, scale,
                          separable_transform, set_debug_checks, sqrt, sub,
                          sum_all, tensor_from_bytes, tensor_to_bytes)


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestTensorBasics:
    def test_rank_enforced(self):
        with pytest.raises(ShapeError) as e:
            Tensor(np.zeros((3, 4, 4)))
        assert e.value.axis == "rank"

    def test_dtype_rules(self):
        assert Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32)).dtype == np.float32
        assert Tensor(np.zeros((1, 1, 2, 2), dtype=np.float64)).dtype == np.float64
        # anything else is promoted to the default
        assert Tensor(np.zeros((1, 1, 2, 2), dtype=np.int32)).dtype == np.float64
        assert Tensor(np.zeros((1, 1, 2, 2), dtype=np.float16)).dtype == np.float64

    def test_item(self):
        assert Tensor(np.full((1, 1, 1, 1), 2.5)).item() == 2.5
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 2, 1))).item()

    def test_detach_drops_grad_tracking(self):
        t = Tensor(rand((1, 2, 3, 3)), requires_grad=True)
        d = t.detach()
        assert not d.requires_grad
        assert np.array_equal(d.data, t.data)

    def test_shape_error_message_names_axis(self):
        err = ShapeError("width", "too narrow")
        assert "[axis=width]" in str(err)
        assert err.axis == "width"


class TestElementwise:
    def test_add_sub_mul_values(self):
        a = Tensor(rand((2, 3, 4, 5), 1))
        b = Tensor(rand((2, 3, 4, 5), 2))
        assert np.array_equal((a + b).data, a.data + b.data)
        assert np.array_equal((a - b).data, a.data - b.data)
        assert np.array_equal((a * b).data, a.data * b.data)

    def test_shape_mismatch_raises(self):
        a = Tensor(np.zeros((1, 2, 3, 3)))
        b = Tensor(np.zeros((1, 2, 3, 4)))
        for op in (add, sub, mul):
            with pytest.raises(ShapeError):
                op(a, b)

    def test_mixed_dtypes_raise(self):
        a = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        b = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float64))
        with pytest.raises(TypeError):
            add(a, b)

    def test_scale_and_add_scalar(self):
        a = Tensor(rand((1, 2, 2, 2)))
        assert np.allclose(scale(a, 2.5).data, a.data * 2.5)
        assert np.allclose(T.add_scalar(a, -1.25).data, a.data - 1.25)

    def test_sqrt(self):
        a = Tensor(np.abs(rand((1, 2, 3, 3))) + 0.1)
        assert np.allclose(sqrt(a).data, np.sqrt(a.data))

    def test_leaky_relu_values_and_slope_domain(self):
        x = Tensor(np.array([[[[-2.0, -0.5], [0.0, 3.0]]]]))
        y = leaky_relu(x, 0.2)
        assert np.allclose(y.data, [[[[-0.4, -0.1], [0.0, 3.0]]]])
        for bad in (0.0, 1.0, -0.3, 1.5):
            with pytest.raises(ValueError):
                leaky_relu(x, bad)

    def test_reductions(self):
        a = Tensor(rand((2, 3, 4, 4)))
        assert sum_all(a).shape == (1, 1, 1, 1)
        assert np.isclose(sum_all(a).item(), a.data.sum())
        assert np.isclose(mean_all(a).item(), a.data.mean())

    def test_debug_checks_catch_nonfinite(self):
        set_debug_checks(True)
        try:
            a = Tensor(np.full((1, 1, 1, 1), -1.0))
            with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
                sqrt(a)
        finally:
            set_debug_checks(False)
        # disabled again: silently produces nan
        with np.errstate(invalid="ignore"):
            assert np.isnan(sqrt(Tensor(np.full((1, 1, 1, 1), -1.0))).item())


class TestStructureOps:
    def test_concat_and_backsplit(self):
        parts = [Tensor(rand((2, c, 3, 3), c), requires_grad=True) for c in (1, 2, 3)]
        with GradientTape() as tape:
            loss = sum_all(concat_channels(parts))
        backward(tape, loss)
        for p in parts:
            assert np.array_equal(p.grad, np.ones_like(p.data))
        cat = concat_channels(parts)
        assert cat.shape == (2, 6, 3, 3)
        assert np.array_equal(cat.data[:, 1:3], parts[1].data)

    def test_concat_validation(self):
        with pytest.raises(ShapeError):
            concat_channels([])
        a = Tensor(np.zeros((1, 2, 3, 3)))
        b = Tensor(np.zeros((1, 2, 4, 3)))
        with pytest.raises(ShapeError):
            concat_channels([a, b])

    def test_pixel_shuffle_documented_example(self):
        # channels [a, b, c, d] at one pixel become the 2x2 tile [[a, b], [c, d]]
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
        y = pixel_shuffle(x, 2)
        assert y.shape == (1, 1, 2, 2)
        assert np.array_equal(y.data[0, 0], [[1.0, 2.0], [3.0, 4.0]])

    def test_shuffle_roundtrip_exact(self):
        x = Tensor(rand((2, 8, 3, 3), 7))
        back = pixel_unshuffle(pixel_shuffle(x, 2), 2)
        assert np.array_equal(back.data, x.data)
        y = Tensor(rand((2, 2, 6, 4), 8))
        assert np.array_equal(pixel_shuffle(pixel_unshuffle(y, 2), 2).data, y.data)

    def test_shuffle_validation(self):
        with pytest.raises(ShapeError):
            pixel_shuffle(Tensor(np.zeros((1, 3, 2, 2))), 2)
        with pytest.raises(ShapeError):
            pixel_unshuffle(Tensor(np.zeros((1, 3, 3, 2))), 2)
        with pytest.raises(ValueError):
            pixel_shuffle(Tensor(np.zeros((1, 4, 2, 2))), 0)

    def test_downsample_strides_and_validation(self):
        x = Tensor(rand((1, 2, 8, 8)))
        y = downsample(x, 4)
        assert np.array_equal(y.data, x.data[:, :, ::4, ::4])
        with pytest.raises(ShapeError):
            downsample(Tensor(np.zeros((1, 1, 6, 6))), 4)

    def test_separable_transform_matches_matmul(self):
        x = Tensor(rand((2, 3, 5, 6)))
        rows = rand((4, 5), 3)
        cols = rand((7, 6), 4)
        y = separable_transform(x, rows, cols)
        ref = np.einsum("ij,bcjk,lk->bcil", rows, x.data, cols)
        assert y.shape == (2, 3, 4, 7)
        assert np.allclose(y.data, ref, atol=1e-12)


def conv_oracle(x, w, b, pad):
    """Direct nested-loop cross-correlation with zero padding."""
    bs, ci, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((bs, o, oh, ow))
    for n in range(bs):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(ci):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[n, c, i + u, j + v] * w[oc, c, u, v]
                    out[n, oc, i, j] = acc
            if b is not None:
                out[n, oc] += b[0, oc, 0, 0]
    return out


class TestConv2d:
    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((2, 3, 5, 5)))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))
        b = Tensor(rng.standard_normal((1, 4, 1, 1)))
        got = conv2d(x, w, b, padding="same")
        ref = conv_oracle(x.data, w.data, b.data, 1)
        assert np.max(np.abs(got.data - ref)) < 1e-10

    def test_valid_padding(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((1, 2, 6, 7)))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)))
        got = conv2d(x, w, padding="valid")
        assert got.shape == (1, 3, 4, 5)
        ref = conv_oracle(x.data, w.data, None, 0)
        assert np.max(np.abs(got.data - ref)) < 1e-10

    def test_identity_kernel(self):
        x = Tensor(rand((1, 1, 4, 4)))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        y = conv2d(x, Tensor(w))
        assert np.allclose(y.data, x.data)

    def test_validation(self):
        x = Tensor(np.zeros((1, 3, 5, 5)))
        with pytest.raises(ShapeError):   # even kernel
            conv2d(x, Tensor(np.zeros((1, 3, 2, 2))))
        with pytest.raises(ShapeError):   # non-square
            conv2d(x, Tensor(np.zeros((1, 3, 3, 5))))
        with pytest.raises(ShapeError):   # channel mismatch
            conv2d(x, Tensor(np.zeros((1, 2, 3, 3))))
        with pytest.raises(ShapeError):   # bad bias shape
            conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros((1, 1, 1, 1))))
        with pytest.raises(ValueError):
            conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), padding="reflect")
        with pytest.raises(ShapeError):   # too small for valid
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))),
                   padding="valid")


class TestBinaryDump:
    def test_roundtrip_bitwise(self, tmp_path):
        arr = rand((2, 3, 4, 5), 9)
        p = tmp_path / "t.bin"
        save_tensor(Tensor(arr), p)
        back = load_tensor(p)
        assert back.dtype == np.float64
        assert np.array_equal(back, arr)

    def test_magic_and_layout(self):
        blob = tensor_to_bytes(np.ones((1, 2, 3, 4)))
        assert blob[:6] == b"OVSRT1"
        assert len(blob) == 6 + 16 + 8 * 24

    def test_streamed_decoding(self):
        a, b = rand((1, 1, 2, 2), 1), rand((2, 1, 1, 3), 2)
        blob = tensor_to_bytes(a) + tensor_to_bytes(b)
        got_a, off = tensor_from_bytes(blob)
        got_b, end = tensor_from_bytes(blob, off)
        assert end == len(blob)
        assert np.array_equal(got_a, a) and np.array_equal(got_b, b)

    def test_corruption_errors(self, tmp_path):
        blob = tensor_to_bytes(np.ones((1, 1, 2, 2)))
        with pytest.raises(ValueError, match="magic"):
            tensor_from_bytes(b"NOPE" + blob)
        with pytest.raises(ValueError, match="truncated"):
            tensor_from_bytes(blob[:-4])
        p = tmp_path / "t.bin"
        p.write_bytes(blob + b"extra")
        with pytest.raises(ValueError, match="trailing"):
            load_tensor(p)

    def test_float32_payload_upcast(self):
        arr = rand((1, 1, 2, 2)).astype(np.float32)
        back, _ = tensor_from_bytes(tensor_to_bytes(Tensor(arr)))
        assert back.dtype == np.float64
        assert np.array_equal(back, arr.astype(np.float64))
