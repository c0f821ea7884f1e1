import numpy as np
import pytest

import reference_nn
from budsim.mlengine import (
    ChecksumMismatch,
    InferenceResult,
    LayerSpec,
    MlEngine,
    ModelDescriptor,
    ModelTransfer,
    NoModel,
    ShapeMismatch,
    ValidationFailed,
    deserialize_model,
    requantize,
    run_layer,
    serialize_model,
    validate_model,
)
from budsim.wire import ErrCode


def conv_layer(in_shape, out_c, kh=3, kw=3, stride=1, bits=8, rng=None, mult=1, shift=0,
               weights=None, bias=None):
    oh = (in_shape[0] - kh) // stride + 1
    ow = (in_shape[1] - kw) // stride + 1
    wshape = (out_c, kh, kw, in_shape[2])
    if weights is None:
        lim = 1 << (bits - 1)
        weights = rng.integers(-lim, lim, wshape).astype(np.int8)
    if bias is None:
        bias = np.zeros(out_c, dtype=np.int32)
    return LayerSpec("conv2d", in_shape, (oh, ow, out_c), bits,
                     dict(kh=kh, kw=kw, stride=stride, weights=weights, bias=bias,
                          mult=mult, shift=shift))


def fc_layer(in_shape, out_n, bits=8, rng=None, mult=1, shift=0):
    flat = int(np.prod(in_shape))
    lim = 1 << (bits - 1)
    weights = rng.integers(-lim, lim, (out_n, flat)).astype(np.int8)
    bias = rng.integers(-100, 100, out_n).astype(np.int32)
    return LayerSpec("fc", in_shape, (1, 1, out_n), bits,
                     dict(weights=weights, bias=bias, mult=mult, shift=shift))


def pool_layer(in_shape, op="max"):
    out = (in_shape[0] // 2, in_shape[1] // 2, in_shape[2])
    return LayerSpec("pool", in_shape, out, 8, dict(op=op))


def simple_model(rng, n_extra_layers=0):
    layers = [conv_layer((8, 8, 2), 4, rng=rng, mult=1, shift=6)]
    layers.append(pool_layer(layers[-1].out_shape))
    layers.append(fc_layer(layers[-1].out_shape, 5, rng=rng, mult=1, shift=7))
    for _ in range(n_extra_layers):
        shape = layers[-1].out_shape
        layers.append(LayerSpec("residual_add", shape, shape, 8,
                                dict(source=len(layers) - 1, mult=1, shift=1)))
    return ModelDescriptor((8, 8, 2), layers)


def calibrated_scale(max_abs_acc):
    """mult/shift representing about 127/max|acc| as a dyadic rational."""
    if max_abs_acc <= 0:
        return 1, 0
    scale = 100.0 / max_abs_acc
    shift = 15
    mult = max(1, round(scale * (1 << shift)))
    return mult, shift


def random_model(rng):
    """Small random chain with calibrated requantization scales."""
    in_shape = (int(rng.integers(6, 12)), int(rng.integers(6, 12)), int(rng.integers(1, 4)))
    layers = []
    shape = in_shape
    n = int(rng.integers(2, 5))
    for i in range(n):
        choice = rng.choice(["conv2d", "pool", "fc", "residual_add"])
        if i == n - 1:
            choice = "fc"
        if choice == "conv2d" and shape[0] >= 4 and shape[1] >= 4:
            bits = int(rng.choice([2, 4, 8]))
            kh = int(rng.integers(1, 4))
            layer = conv_layer(shape, int(rng.integers(1, 5)), kh=kh, kw=kh,
                               stride=int(rng.choice([1, 2])), bits=bits, rng=rng)
            bound = (1 << (bits - 1)) * 127 * kh * kh * shape[2]
            layer.params["mult"], layer.params["shift"] = calibrated_scale(bound)
            layers.append(layer)
        elif choice == "pool" and shape[0] >= 2 and shape[1] >= 2:
            layers.append(pool_layer(shape, op=str(rng.choice(["max", "avg"]))))
        elif choice == "residual_add" and layers:
            prev = layers[-1].out_shape
            layers.append(LayerSpec("residual_add", prev, prev, 8,
                                    dict(source=len(layers) - 1, mult=1, shift=1)))
        else:
            layer = fc_layer(shape, int(rng.integers(2, 8)), rng=rng)
            bound = 127 * 128 * int(np.prod(shape))
            layer.params["mult"], layer.params["shift"] = calibrated_scale(bound)
            layers.append(layer)
        shape = layers[-1].out_shape
    desc = ModelDescriptor(in_shape, layers)
    assert validate_model(desc) == []
    return desc


class TestValidator:
    def test_65_layers_rejected(self):
        rng = np.random.default_rng(1)
        desc = simple_model(rng, n_extra_layers=62)
        assert len(desc.layers) == 65
        violations = validate_model(desc)
        assert any("65 > 64" in v for v in violations)

    def test_64_layers_accepted(self):
        rng = np.random.default_rng(1)
        desc = simple_model(rng, n_extra_layers=61)
        assert len(desc.layers) == 64
        assert validate_model(desc) == []

    def test_input_1025_rejected_1024_accepted(self):
        rng = np.random.default_rng(2)
        big = ModelDescriptor((1025, 64, 1), [conv_layer((1025, 64, 1), 1, rng=rng)])
        assert any("exceeds 1024x1024" in v for v in validate_model(big))
        edge = ModelDescriptor((1024, 1024, 1),
                               [conv_layer((1024, 1024, 1), 1, kh=1, kw=1, rng=rng)])
        assert validate_model(edge) == []

    def test_all_violations_reported_not_just_first(self):
        rng = np.random.default_rng(3)
        desc = simple_model(rng, n_extra_layers=62)
        desc.input_shape = (1025, 1025, 2)
        desc.layers[0].weight_bits = 3
        violations = validate_model(desc)
        assert len(violations) >= 3

    def test_shape_chain_break_detected(self):
        rng = np.random.default_rng(4)
        desc = simple_model(rng)
        desc.layers[1] = pool_layer((9, 9, 4))
        assert any("in_shape" in v for v in validate_model(desc))

    def test_weight_bits_range_enforced(self):
        rng = np.random.default_rng(5)
        layer = conv_layer((4, 4, 1), 1, kh=1, kw=1, bits=2, rng=rng)
        layer.params["weights"] = np.array([[[[5]]]], dtype=np.int8)  # out of 2-bit range
        desc = ModelDescriptor((4, 4, 1), [layer])
        assert any("2-bit range" in v for v in validate_model(desc))


class TestSerialization:
    def test_roundtrip(self):
        rng = np.random.default_rng(6)
        desc = random_model(rng)
        blob = serialize_model(desc)
        back = deserialize_model(blob)
        assert back.input_shape == desc.input_shape
        assert len(back.layers) == len(desc.layers)
        for a, b in zip(desc.layers, back.layers):
            assert (a.kind, tuple(a.in_shape), tuple(a.out_shape), a.weight_bits) == (
                b.kind, tuple(b.in_shape), tuple(b.out_shape), b.weight_bits)
            if "weights" in a.params:
                assert np.array_equal(a.params["weights"], b.params["weights"])
                assert np.array_equal(a.params["bias"], b.params["bias"])

    def test_corrupt_blob_checksum(self):
        rng = np.random.default_rng(7)
        blob = bytearray(serialize_model(simple_model(rng)))
        blob[10] ^= 0x40
        with pytest.raises(ChecksumMismatch):
            deserialize_model(bytes(blob))

    def test_validate_iff_load(self):
        rng = np.random.default_rng(8)
        good = simple_model(rng)
        bad = simple_model(rng, n_extra_layers=62)
        engine = MlEngine()
        assert validate_model(good) == []
        engine.load_model(serialize_model(good))
        assert validate_model(bad) != []
        with pytest.raises(ValidationFailed):
            engine.load_model(serialize_model(bad))


class TestInterpreter:
    def test_identity_1x1_conv(self):
        w = np.ones((1, 1, 1, 1), dtype=np.int8)
        layer = LayerSpec("conv2d", (4, 4, 1), (4, 4, 1), 8,
                          dict(kh=1, kw=1, stride=1, weights=w,
                               bias=np.zeros(1, dtype=np.int32), mult=1, shift=0))
        desc = ModelDescriptor((4, 4, 1), [layer])
        engine = MlEngine()
        engine.load_model(serialize_model(desc))
        x = np.arange(16, dtype=np.int8).reshape(4, 4, 1)
        assert np.array_equal(engine.infer(x).output, x)

    def test_no_model(self):
        with pytest.raises(NoModel):
            MlEngine().infer(np.zeros((4, 4, 1), dtype=np.int8))

    def test_shape_mismatch(self):
        rng = np.random.default_rng(9)
        engine = MlEngine()
        engine.load_model(serialize_model(simple_model(rng)))
        with pytest.raises(ShapeMismatch):
            engine.infer(np.zeros((9, 9, 2), dtype=np.int8))

    def test_requantize_round_half_away(self):
        acc = np.array([5, -5, 6, -6], dtype=np.int64)
        out = requantize(acc, 1, 1)  # /2 with round half away
        assert list(out) == [3, -3, 3, -3]

    @pytest.mark.parametrize("kind", ["conv2d", "pool_max", "pool_avg", "fc", "residual"])
    def test_single_layer_within_1_lsb_of_float(self, kind):
        rng = np.random.default_rng(hash(kind) % 2**32)
        for _ in range(20):
            x = rng.integers(-128, 128, (6, 6, 3)).astype(np.int8)
            if kind == "conv2d":
                layer = conv_layer((6, 6, 3), 2, kh=3, kw=3, rng=rng,
                                   mult=int(rng.integers(1, 2**20)), shift=int(rng.integers(8, 24)))
                got = run_layer(layer, x)
                ref = reference_nn.conv2d(x, layer)
            elif kind == "pool_max":
                layer = pool_layer((6, 6, 3), "max")
                got, ref = run_layer(layer, x), reference_nn.pool(x, layer)
            elif kind == "pool_avg":
                layer = pool_layer((6, 6, 3), "avg")
                got, ref = run_layer(layer, x), reference_nn.pool(x, layer)
            elif kind == "fc":
                layer = fc_layer((6, 6, 3), 4, rng=rng,
                                 mult=int(rng.integers(1, 2**16)), shift=int(rng.integers(10, 24)))
                got, ref = run_layer(layer, x), reference_nn.fc(x, layer)
            else:
                src = rng.integers(-128, 128, (6, 6, 3)).astype(np.int8)
                layer = LayerSpec("residual_add", (6, 6, 3), (6, 6, 3), 8,
                                  dict(source=-1, mult=1, shift=1))
                got = run_layer(layer, x, source=src)
                ref = reference_nn.residual_add(x, src, layer)
            assert np.max(np.abs(got.astype(int) - ref.astype(int))) <= 1

    def test_100_random_models_match_float_reference(self):
        rng = np.random.default_rng(0xC0FFEE)
        worst = 0
        for _ in range(100):
            desc = random_model(rng)
            engine = MlEngine()
            engine.load_model(serialize_model(desc))
            x = rng.integers(-128, 128, desc.input_shape).astype(np.int8)
            got = engine.infer(x).output
            ref = reference_nn.run_model(desc, x)
            n_stages = sum(1 for l in desc.layers if l.kind != "pool" or
                           l.params.get("op") == "avg")
            diff = int(np.max(np.abs(got.astype(int) - ref.astype(int))))
            worst = max(worst, diff)
            assert diff <= n_stages, f"diff {diff} > {n_stages} stages"
        assert worst <= 3

    def test_determinism_across_engines(self):
        rng = np.random.default_rng(12)
        desc = random_model(rng)
        blob = serialize_model(desc)
        x = rng.integers(-128, 128, desc.input_shape).astype(np.int8)
        outs = []
        for _ in range(2):  # two independent "buds"
            engine = MlEngine()
            engine.load_model(blob)
            outs.append(engine.infer(x).output)
        assert np.array_equal(outs[0], outs[1])

    def test_energy_scales_with_weight_bits(self):
        rng = np.random.default_rng(13)
        lo = ModelDescriptor((6, 6, 1), [conv_layer((6, 6, 1), 2, bits=2, rng=rng)])
        hi = ModelDescriptor((6, 6, 1), [conv_layer((6, 6, 1), 2, bits=8, rng=rng)])
        x = np.zeros((6, 6, 1), dtype=np.int8)
        engines = []
        for desc in (lo, hi):
            e = MlEngine()
            e.load_model(serialize_model(desc))
            engines.append(e.infer(x))
        assert engines[1].energy_units == pytest.approx(4 * engines[0].energy_units)
        assert engines[0].report["powered_down"] == 62

    def test_result_callback_fires_once(self):
        rng = np.random.default_rng(14)
        calls = []
        engine = MlEngine(on_result=calls.append)
        engine.load_model(serialize_model(simple_model(rng)))
        engine.infer(np.zeros((8, 8, 2), dtype=np.int8))
        assert len(calls) == 1 and isinstance(calls[0], InferenceResult)


class TestTransfer:
    def test_begin_chunk_commit(self):
        rng = np.random.default_rng(15)
        blob = serialize_model(simple_model(rng))
        engine = MlEngine()
        xfer = ModelTransfer(engine)
        import struct

        assert xfer.handle(bytes([0]) + struct.pack("<I", len(blob)))[0] == ErrCode.OK
        for off in range(0, len(blob), 200):
            chunk = blob[off : off + 200]
            err, _ = xfer.handle(bytes([1]) + struct.pack("<I", off) + chunk)
            assert err == ErrCode.OK
        err, detail = xfer.handle(bytes([2]))
        assert err == ErrCode.OK and detail == b"loaded"
        assert engine.model is not None

    def test_corrupted_chunk_keeps_previous_model(self):
        rng = np.random.default_rng(16)
        engine = MlEngine()
        good = serialize_model(simple_model(rng))
        engine.load_model(good)
        previous = engine.model
        bad = bytearray(good)
        bad[20] ^= 0xFF
        import struct

        xfer = ModelTransfer(engine)
        xfer.handle(bytes([0]) + struct.pack("<I", len(bad)))
        xfer.handle(bytes([1]) + struct.pack("<I", 0) + bytes(bad))
        err, detail = xfer.handle(bytes([2]))
        assert err == ErrCode.BAD_VALUE and detail == b"checksum"
        assert engine.model is previous

    def test_oversized_model_rejected_on_commit(self):
        rng = np.random.default_rng(17)
        blob = serialize_model(simple_model(rng, n_extra_layers=62))
        engine = MlEngine()
        xfer = ModelTransfer(engine)
        import struct

        xfer.handle(bytes([0]) + struct.pack("<I", len(blob)))
        xfer.handle(bytes([1]) + struct.pack("<I", 0) + blob)
        err, detail = xfer.handle(bytes([2]))
        assert err == ErrCode.BAD_VALUE and detail.startswith(b"invalid")
        assert engine.model is None
