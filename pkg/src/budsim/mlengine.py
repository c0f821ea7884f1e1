"""CNN-accelerator model validation, transfer and quantized reference execution.

The accelerator contract: at most 64 layers, inputs no larger than 1024x1024,
weights 1/2/4/8 bits, layer kinds conv2d / pool / fc / residual_add.  The
interpreter executes with int8 activations, declared-width weights stored as
int8, 32-bit accumulation and saturating fixed-point requantization
(``round(acc * mult / 2**shift)`` with round-half-away-from-zero).

Model blob format (little-endian)::

    "OBML" | version:u8 | n_layers:u8 | in_h:u16 in_w:u16 in_c:u16 |
    per-layer: kind:u8 bits:u8 in_h:u16 in_w:u16 in_c:u16 out_h:u16 out_w:u16 out_c:u16
               conv2d: kh:u8 kw:u8 stride:u8 mult:u32 shift:u8
               pool:   op:u8 (0 max, 1 avg)
               fc:     mult:u32 shift:u8
               residual_add: source:u8 mult:u32 shift:u8
    | weights (per conv/fc layer: int8 weights then int32 biases) | crc32:u32

Transfer rides hostlink CONFIG writes to the CNN peripheral, endpoint 0x10,
as a begin/chunk/commit sub-protocol (op byte 0/1/2).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"OBML"
MAX_LAYERS = 64
MAX_INPUT_HW = 1024
WEIGHT_BITS = (1, 2, 4, 8)
KINDS = ("conv2d", "pool", "fc", "residual_add")
POOL_K = 2
MACS_PER_TICK = 256

XFER_BEGIN = 0
XFER_CHUNK = 1
XFER_COMMIT = 2


class MlError(Exception):
    pass


class ChecksumMismatch(MlError):
    pass


class ValidationFailed(MlError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class ShapeMismatch(MlError):
    pass


class NoModel(MlError):
    pass


@dataclass
class LayerSpec:
    kind: str
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]
    weight_bits: int = 8
    # conv2d: kh kw stride weights(out_c,kh,kw,in_c) bias(out_c) mult shift
    # pool: op ("max"|"avg"); fc: weights(out_n,flat) bias mult shift
    # residual_add: source (earlier layer index, -1 = model input) mult shift
    params: dict = field(default_factory=dict)


@dataclass
class ModelDescriptor:
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    version: int = 1


@dataclass
class InferenceResult:
    output: np.ndarray           # int8, final layer out_shape
    latency_ticks: int
    energy_units: float
    report: dict


def _layer_macs(layer: LayerSpec) -> int:
    if layer.kind == "conv2d":
        oh, ow, oc = layer.out_shape
        kh, kw = layer.params["kh"], layer.params["kw"]
        return oh * ow * oc * kh * kw * layer.in_shape[2]
    if layer.kind == "fc":
        return int(np.prod(layer.in_shape)) * layer.out_shape[2]
    if layer.kind == "residual_add":
        return int(np.prod(layer.in_shape))
    return 0


def _conv_out_shape(in_shape, kh, kw, stride, out_c):
    h, w, _ = in_shape
    return ((h - kh) // stride + 1, (w - kw) // stride + 1, out_c)


def validate_model(desc: ModelDescriptor) -> list[str]:
    """Return every violated accelerator constraint (empty list = accepted)."""
    v: list[str] = []
    if len(desc.layers) > MAX_LAYERS:
        v.append(f"layer count {len(desc.layers)} > {MAX_LAYERS}")
    if not desc.layers:
        v.append("model has no layers")
    h, w, c = desc.input_shape
    if h > MAX_INPUT_HW or w > MAX_INPUT_HW:
        v.append(f"input {h}x{w} exceeds {MAX_INPUT_HW}x{MAX_INPUT_HW}")
    if h < 1 or w < 1 or c < 1:
        v.append(f"degenerate input shape {desc.input_shape}")

    prev_shape = desc.input_shape
    for i, layer in enumerate(desc.layers):
        tag = f"layer {i} ({layer.kind})"
        if layer.kind not in KINDS:
            v.append(f"{tag}: unknown kind")
            continue
        if layer.weight_bits not in WEIGHT_BITS:
            v.append(f"{tag}: weight_bits {layer.weight_bits} not in {WEIGHT_BITS}")
        if tuple(layer.in_shape) != tuple(prev_shape):
            v.append(f"{tag}: in_shape {layer.in_shape} != previous out {prev_shape}")
        if layer.kind == "conv2d":
            p = layer.params
            expect = _conv_out_shape(layer.in_shape, p["kh"], p["kw"], p["stride"],
                                     layer.out_shape[2])
            if expect != tuple(layer.out_shape) or expect[0] < 1 or expect[1] < 1:
                v.append(f"{tag}: out_shape {layer.out_shape} != derived {expect}")
            wshape = (layer.out_shape[2], p["kh"], p["kw"], layer.in_shape[2])
            if p["weights"].shape != wshape:
                v.append(f"{tag}: weight shape {p['weights'].shape} != {wshape}")
            lim = 1 << (layer.weight_bits - 1)
            if p["weights"].min() < -lim or p["weights"].max() > lim - 1:
                v.append(f"{tag}: weights exceed {layer.weight_bits}-bit range")
        elif layer.kind == "pool":
            ih, iw, ic = layer.in_shape
            expect = (ih // POOL_K, iw // POOL_K, ic)
            if tuple(layer.out_shape) != expect or expect[0] < 1 or expect[1] < 1:
                v.append(f"{tag}: out_shape {layer.out_shape} != derived {expect}")
            if layer.params.get("op", "max") not in ("max", "avg"):
                v.append(f"{tag}: unknown pool op")
        elif layer.kind == "fc":
            if tuple(layer.out_shape[:2]) != (1, 1):
                v.append(f"{tag}: fc out_shape must be (1, 1, n)")
            flat = int(np.prod(layer.in_shape))
            wshape = (layer.out_shape[2], flat)
            if layer.params["weights"].shape != wshape:
                v.append(f"{tag}: weight shape {layer.params['weights'].shape} != {wshape}")
            lim = 1 << (layer.weight_bits - 1)
            if layer.params["weights"].min() < -lim or layer.params["weights"].max() > lim - 1:
                v.append(f"{tag}: weights exceed {layer.weight_bits}-bit range")
        elif layer.kind == "residual_add":
            src = layer.params["source"]
            src_shape = desc.input_shape if src == -1 else (
                desc.layers[src].out_shape if 0 <= src < i else None
            )
            if src_shape is None:
                v.append(f"{tag}: source {src} not an earlier layer")
            elif tuple(src_shape) != tuple(layer.in_shape):
                v.append(f"{tag}: source shape {src_shape} != in_shape {layer.in_shape}")
            if tuple(layer.out_shape) != tuple(layer.in_shape):
                v.append(f"{tag}: residual out_shape must equal in_shape")
        prev_shape = layer.out_shape
    return v


def requantize(acc: np.ndarray, mult: int, shift: int) -> np.ndarray:
    """Saturating fixed-point rescale of int32/int64 accumulators to int8."""
    prod = acc.astype(np.int64) * int(mult)
    if shift > 0:
        half = np.int64(1) << (shift - 1)
        mag = np.abs(prod)
        out = np.sign(prod) * ((mag + half) >> shift)
    else:
        out = prod
    return np.clip(out, -128, 127).astype(np.int8)


def _saturate_i32(acc: np.ndarray) -> np.ndarray:
    return np.clip(acc, -(2**31), 2**31 - 1)


def run_layer(layer: LayerSpec, x: np.ndarray, source: np.ndarray | None = None) -> np.ndarray:
    """Execute one layer on an int8 activation tensor (h, w, c)."""
    p = layer.params
    if layer.kind == "conv2d":
        kh, kw, stride = p["kh"], p["kw"], p["stride"]
        oh, ow, oc = layer.out_shape
        weights = p["weights"].astype(np.int64)
        acc = np.zeros((oh, ow, oc), dtype=np.int64)
        xi = x.astype(np.int64)
        for di in range(kh):
            for dj in range(kw):
                patch = xi[di : di + oh * stride : stride, dj : dj + ow * stride : stride, :]
                acc += np.tensordot(patch, weights[:, di, dj, :], axes=([2], [1]))
        acc = _saturate_i32(acc + p["bias"].astype(np.int64))
        return requantize(acc, p["mult"], p["shift"])
    if layer.kind == "pool":
        ih, iw, ic = layer.in_shape
        oh, ow, _ = layer.out_shape
        blocks = x[: oh * POOL_K, : ow * POOL_K, :].reshape(oh, POOL_K, ow, POOL_K, ic)
        if p.get("op", "max") == "max":
            return blocks.max(axis=(1, 3)).astype(np.int8)
        acc = blocks.astype(np.int64).sum(axis=(1, 3))
        return requantize(acc, 1, 2)  # mean over the 2x2 block
    if layer.kind == "fc":
        acc = p["weights"].astype(np.int64) @ x.astype(np.int64).reshape(-1)
        acc = _saturate_i32(acc + p["bias"].astype(np.int64))
        return requantize(acc, p["mult"], p["shift"]).reshape(layer.out_shape)
    if layer.kind == "residual_add":
        acc = x.astype(np.int64) + source.astype(np.int64)
        return requantize(acc, p["mult"], p["shift"])
    raise MlError(f"unknown layer kind {layer.kind}")


# --- serialization ----------------------------------------------------------

_KIND_CODE = {k: i for i, k in enumerate(KINDS)}
_POOL_CODE = {"max": 0, "avg": 1}


def serialize_model(desc: ModelDescriptor) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<BBHHH", desc.version, len(desc.layers), *desc.input_shape)
    weights = bytearray()
    for layer in desc.layers:
        p = layer.params
        out += struct.pack(
            "<BBHHHHHH", _KIND_CODE[layer.kind], layer.weight_bits,
            *layer.in_shape, *layer.out_shape,
        )
        if layer.kind == "conv2d":
            out += struct.pack("<BBBIB", p["kh"], p["kw"], p["stride"], p["mult"], p["shift"])
            weights += p["weights"].astype("<i1").tobytes()
            weights += p["bias"].astype("<i4").tobytes()
        elif layer.kind == "pool":
            out += struct.pack("<B", _POOL_CODE[p.get("op", "max")])
        elif layer.kind == "fc":
            out += struct.pack("<IB", p["mult"], p["shift"])
            weights += p["weights"].astype("<i1").tobytes()
            weights += p["bias"].astype("<i4").tobytes()
        elif layer.kind == "residual_add":
            out += struct.pack("<bIB", p["source"], p["mult"], p["shift"])
    out += weights
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def deserialize_model(blob: bytes) -> ModelDescriptor:
    if len(blob) < 4 + 8 + 4 or blob[:4] != MAGIC:
        raise ChecksumMismatch("not a model blob")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise ChecksumMismatch("blob CRC mismatch")
    off = 4
    version, n_layers, ih, iw, ic = struct.unpack_from("<BBHHH", blob, off)
    off += 8
    metas = []
    for _ in range(n_layers):
        kind_code, bits, lih, liw, lic, loh, low, loc = struct.unpack_from("<BBHHHHHH", blob, off)
        off += 14
        if kind_code >= len(KINDS):
            raise ChecksumMismatch(f"unknown layer kind code {kind_code}")
        kind = KINDS[kind_code]
        meta = dict(kind=kind, bits=bits, in_shape=(lih, liw, lic), out_shape=(loh, low, loc))
        if kind == "conv2d":
            meta["kh"], meta["kw"], meta["stride"], meta["mult"], meta["shift"] = (
                struct.unpack_from("<BBBIB", blob, off)
            )
            off += 8
        elif kind == "pool":
            (op_code,) = struct.unpack_from("<B", blob, off)
            off += 1
            meta["op"] = "avg" if op_code else "max"
        elif kind == "fc":
            meta["mult"], meta["shift"] = struct.unpack_from("<IB", blob, off)
            off += 5
        elif kind == "residual_add":
            meta["source"], meta["mult"], meta["shift"] = struct.unpack_from("<bIB", blob, off)
            off += 6
        metas.append(meta)

    layers = []
    for meta in metas:
        kind = meta["kind"]
        params: dict = {}
        if kind == "conv2d":
            oc = meta["out_shape"][2]
            wshape = (oc, meta["kh"], meta["kw"], meta["in_shape"][2])
            n_w = int(np.prod(wshape))
            params = dict(kh=meta["kh"], kw=meta["kw"], stride=meta["stride"],
                          mult=meta["mult"], shift=meta["shift"])
            params["weights"] = np.frombuffer(blob, "<i1", n_w, off).reshape(wshape).copy()
            off += n_w
            params["bias"] = np.frombuffer(blob, "<i4", oc, off).copy()
            off += 4 * oc
        elif kind == "pool":
            params = dict(op=meta["op"])
        elif kind == "fc":
            out_n = meta["out_shape"][2]
            flat = int(np.prod(meta["in_shape"]))
            params = dict(mult=meta["mult"], shift=meta["shift"])
            params["weights"] = np.frombuffer(blob, "<i1", out_n * flat, off).reshape(out_n, flat).copy()
            off += out_n * flat
            params["bias"] = np.frombuffer(blob, "<i4", out_n, off).copy()
            off += 4 * out_n
        elif kind == "residual_add":
            params = dict(source=meta["source"], mult=meta["mult"], shift=meta["shift"])
        layers.append(LayerSpec(kind, meta["in_shape"], meta["out_shape"], meta["bits"], params))
    return ModelDescriptor(input_shape=(ih, iw, ic), layers=layers, version=version)


class MlEngine:
    """Single-slot model residency and synchronous inference."""

    def __init__(self, on_result=None):
        self.model: ModelDescriptor | None = None
        self.on_result = on_result  # callable(InferenceResult)

    def load_model(self, blob: bytes) -> ModelDescriptor:
        desc = deserialize_model(blob)  # raises ChecksumMismatch, model untouched
        violations = validate_model(desc)
        if violations:
            raise ValidationFailed(violations)
        self.model = desc
        return desc

    def infer(self, input_tensor: np.ndarray) -> InferenceResult:
        if self.model is None:
            raise NoModel("no model resident")
        x = np.asarray(input_tensor, dtype=np.int8)
        if x.shape != tuple(self.model.input_shape):
            raise ShapeMismatch(f"input {x.shape} != {self.model.input_shape}")
        outputs: list[np.ndarray] = []
        cur = x
        total_macs = 0
        energy = 0.0
        for layer in self.model.layers:
            src = None
            if layer.kind == "residual_add":
                s = layer.params["source"]
                src = x if s == -1 else outputs[s]
            cur = run_layer(layer, cur, source=src)
            outputs.append(cur)
            macs = _layer_macs(layer)
            total_macs += macs
            energy += macs * layer.weight_bits / 8.0
        widest = max(
            (l.out_shape[2] for l in self.model.layers if l.kind == "conv2d"), default=1
        )
        active = min(64, widest)
        result = InferenceResult(
            output=cur,
            latency_ticks=-(-total_macs // MACS_PER_TICK),
            energy_units=energy,
            report={"active_processors": active, "powered_down": 64 - active},
        )
        if self.on_result is not None:
            self.on_result(result)
        return result


class ModelTransfer:
    """Begin/chunk/commit assembly of a model blob over CONFIG writes."""

    def __init__(self, engine: MlEngine):
        self.engine = engine
        self._buf: bytearray | None = None
        self._total = 0

    def handle(self, value: bytes) -> tuple[int, bytes]:
        """Returns (err_code, detail) using the hostlink CONFIG error space."""
        from .wire import ErrCode

        if not value:
            return ErrCode.BAD_VALUE, b"empty transfer op"
        op = value[0]
        if op == XFER_BEGIN:
            if len(value) < 5:
                return ErrCode.BAD_VALUE, b"begin needs total length"
            (self._total,) = struct.unpack_from("<I", value, 1)
            self._buf = bytearray(self._total)
            return ErrCode.OK, struct.pack("<I", self._total)
        if op == XFER_CHUNK:
            if self._buf is None:
                return ErrCode.BUSY, b"no transfer begun"
            (offset,) = struct.unpack_from("<I", value, 1)
            chunk = value[5:]
            if offset + len(chunk) > self._total:
                return ErrCode.BAD_VALUE, b"chunk overruns"
            self._buf[offset : offset + len(chunk)] = chunk
            return ErrCode.OK, struct.pack("<I", offset)
        if op == XFER_COMMIT:
            if self._buf is None:
                return ErrCode.BUSY, b"no transfer begun"
            blob = bytes(self._buf)
            self._buf = None
            try:
                self.engine.load_model(blob)
            except ChecksumMismatch:
                return ErrCode.BAD_VALUE, b"checksum"
            except ValidationFailed as e:
                return ErrCode.BAD_VALUE, f"invalid:{len(e.violations)}".encode()
            return ErrCode.OK, b"loaded"
        return ErrCode.BAD_VALUE, b"unknown op"
