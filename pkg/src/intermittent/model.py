"""Network description, the continuous-power reference oracle, and file I/O.

Layer semantics are defined once, here, as explicit fold orders over
saturating fixed-point primitives, and every runtime (reference, tiled,
loop-continuation, accelerated) follows the same orders. Saturating
addition is not associative, so the fold order is part of the contract:

- conv2d: for each output element, accumulate over filter taps in
  (in_channel, row, col) lexicographic order; the first tap initializes the
  accumulator (no zero-init add). Bias, scale shift, and ReLU are applied
  after the last tap, in that order.
- separated triple conv: three 1-D convolutions along the channel, row,
  and column axes in sequence, each accumulating over taps in ascending
  order; bias/shift/ReLU after the third.
- dense FC (and each half of a separated pair): accumulate over input
  columns in ascending order; epilogue as for conv.
- sparse FC: the accumulator starts from the bias (or zero) and folds the
  CSR non-zeros in storage order (row-major, ascending columns); then
  shift and ReLU. Dropping zero-valued taps never changes a result, since
  adding zero is the identity even under saturation.

Activations are raw Q1.15 words at scale 0 by convention; per-tensor weight
scales are compensated through the layer shift by the compression code.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fixedpoint import (
    FixedTensor,
    SparseMatrix,
    qadd,
    qadd_arr,
    qmul,
    qmul_arr,
    qshift_arr,
)


class ModelError(ValueError):
    pass


def _flat(shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


@dataclass(frozen=True)
class Conv2d:
    """Dense 2-D convolution, stride 1, valid padding.

    Weight shape is (out_channels, in_channels, kh, kw). Zero-valued taps
    are legal (e.g. a pruned base model); software paths skip the multiply,
    the accelerated path processes them densely.
    """

    name: str
    weight: FixedTensor
    bias: FixedTensor | None = None
    shift: int = 0
    relu: bool = True
    kind: str = field(default="conv2d", init=False)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ModelError(f"layer {self.name}: conv2d needs (C,H,W) input, got {in_shape}")
        o, c, kh, kw = self.weight.shape
        ci, h, w = in_shape
        if c != ci or h < kh or w < kw:
            raise ModelError(
                f"layer {self.name}: weight {self.weight.shape} does not apply to input {in_shape}"
            )
        if self.bias is not None and self.bias.shape != (o,):
            raise ModelError(f"layer {self.name}: bias shape {self.bias.shape} != ({o},)")
        return (o, h - kh + 1, w - kw + 1)

    def weights(self):
        return {"weight": self.weight} | ({"bias": self.bias} if self.bias is not None else {})

    def param_words(self) -> int:
        n = _flat(self.weight.shape)
        if self.bias is not None:
            n += self.weight.shape[0]
        return n

    def mac_count(self, in_shape) -> int:
        # dense kernels execute every tap, including zero-valued ones
        o, c, kh, kw = self.weight.shape
        oh = in_shape[1] - kh + 1
        ow = in_shape[2] - kw + 1
        return o * c * kh * kw * oh * ow


@dataclass(frozen=True)
class SeparatedTripleConv:
    """Three 1-D filters applied along the channel, row, and column axes."""

    name: str
    f_ch: FixedTensor
    f_row: FixedTensor
    f_col: FixedTensor
    bias: FixedTensor | None = None
    shift: int = 0
    relu: bool = True
    kind: str = field(default="conv1d_separated_triple", init=False)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ModelError(f"layer {self.name}: separated conv needs (C,H,W) input")
        m, n, k = self.f_ch.shape[0], self.f_row.shape[0], self.f_col.shape[0]
        c, h, w = in_shape
        if c < m or h < n or w < k:
            raise ModelError(
                f"layer {self.name}: filters ({m},{n},{k}) do not apply to input {in_shape}"
            )
        out = (c - m + 1, h - n + 1, w - k + 1)
        if self.bias is not None and self.bias.shape != (out[0],):
            raise ModelError(f"layer {self.name}: bias shape mismatch")
        return out

    def weights(self):
        d = {"f_ch": self.f_ch, "f_row": self.f_row, "f_col": self.f_col}
        if self.bias is not None:
            d["bias"] = self.bias
        return d

    def param_words(self) -> int:
        n = self.f_ch.shape[0] + self.f_row.shape[0] + self.f_col.shape[0]
        if self.bias is not None:
            n += self.bias.shape[0]
        return n

    def mac_count(self, in_shape) -> int:
        c, h, w = in_shape
        m, n, k = self.f_ch.shape[0], self.f_row.shape[0], self.f_col.shape[0]
        s1 = (c - m + 1, h, w)
        s2 = (c - m + 1, h - n + 1, w)
        s3 = (c - m + 1, h - n + 1, w - k + 1)
        return m * _flat(s1) + n * _flat(s2) + k * _flat(s3)


@dataclass(frozen=True)
class DenseFC:
    """Fully connected layer: out = W x, W of shape (m, n); input flattened."""

    name: str
    weight: FixedTensor
    bias: FixedTensor | None = None
    shift: int = 0
    relu: bool = True
    kind: str = field(default="fc_dense", init=False)

    def out_shape(self, in_shape):
        m, n = self.weight.shape
        if _flat(in_shape) != n:
            raise ModelError(
                f"layer {self.name}: weight expects {n} inputs, got {_flat(in_shape)}"
            )
        if self.bias is not None and self.bias.shape != (m,):
            raise ModelError(f"layer {self.name}: bias shape mismatch")
        return (m,)

    def weights(self):
        return {"weight": self.weight} | ({"bias": self.bias} if self.bias is not None else {})

    def param_words(self) -> int:
        m, n = self.weight.shape
        return m * n + (m if self.bias is not None else 0)

    def mac_count(self, in_shape) -> int:
        m, n = self.weight.shape
        return m * n


@dataclass(frozen=True)
class SparseFC:
    """Fully connected layer with CSR weights (pruning output)."""

    name: str
    weight: SparseMatrix
    bias: FixedTensor | None = None
    shift: int = 0
    relu: bool = True
    kind: str = field(default="fc_sparse", init=False)

    def out_shape(self, in_shape):
        m, n = self.weight.shape
        if _flat(in_shape) != n:
            raise ModelError(
                f"layer {self.name}: weight expects {n} inputs, got {_flat(in_shape)}"
            )
        if self.bias is not None and self.bias.shape != (m,):
            raise ModelError(f"layer {self.name}: bias shape mismatch")
        return (m,)

    def weights(self):
        return {"bias": self.bias} if self.bias is not None else {}

    def param_words(self) -> int:
        # offsets + column indices + values, plus bias
        m = self.weight.m
        n = (m + 1) + 2 * self.weight.nnz
        if self.bias is not None:
            n += m
        return n

    def mac_count(self, in_shape) -> int:
        return self.weight.nnz


@dataclass(frozen=True)
class SeparatedPairFC:
    """Rank-k separated FC: out = A (B x), A (m,k), B (k,n)."""

    name: str
    a: FixedTensor
    b: FixedTensor
    bias: FixedTensor | None = None
    shift: int = 0
    relu: bool = True
    kind: str = field(default="fc_separated_pair", init=False)

    def out_shape(self, in_shape):
        m, ka = self.a.shape
        kb, n = self.b.shape
        if ka != kb:
            raise ModelError(f"layer {self.name}: factor ranks disagree ({ka} vs {kb})")
        if _flat(in_shape) != n:
            raise ModelError(
                f"layer {self.name}: factor B expects {n} inputs, got {_flat(in_shape)}"
            )
        if self.bias is not None and self.bias.shape != (m,):
            raise ModelError(f"layer {self.name}: bias shape mismatch")
        return (m,)

    def weights(self):
        d = {"a": self.a, "b": self.b}
        if self.bias is not None:
            d["bias"] = self.bias
        return d

    def param_words(self) -> int:
        m, k = self.a.shape
        _, n = self.b.shape
        return k * (m + n) + (m if self.bias is not None else 0)

    def mac_count(self, in_shape) -> int:
        m, k = self.a.shape
        _, n = self.b.shape
        return k * (m + n)


LAYER_KINDS = {
    "conv2d": Conv2d,
    "conv1d_separated_triple": SeparatedTripleConv,
    "fc_dense": DenseFC,
    "fc_sparse": SparseFC,
    "fc_separated_pair": SeparatedPairFC,
}


@dataclass(frozen=True)
class NetworkModel:
    layers: tuple
    input_shape: tuple[int, ...]
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self.validate()

    def validate(self) -> None:
        shape = self.input_shape
        for lay in self.layers:
            shape = lay.out_shape(shape)
        if self.layers and _flat(shape) != self.class_count:
            raise ModelError(
                f"final layer {self.layers[-1].name} yields {_flat(shape)} scores, "
                f"expected {self.class_count}"
            )

    def activation_shapes(self) -> list[tuple[int, ...]]:
        shapes = [self.input_shape]
        for lay in self.layers:
            shapes.append(lay.out_shape(shapes[-1]))
        return shapes

    def param_words(self) -> int:
        return sum(lay.param_words() for lay in self.layers)

    @property
    def param_bytes(self) -> int:
        return 2 * self.param_words()

    def mac_count(self) -> int:
        shapes = self.activation_shapes()
        return sum(lay.mac_count(shapes[i]) for i, lay in enumerate(self.layers))

    def max_activation_elems(self) -> int:
        return max(_flat(s) for s in self.activation_shapes())


# -- canonical reference kernels (the oracle all runtimes are checked
#    against; pure, no device interaction) ------------------------------


def conv_tap_order(c: int, kh: int, kw: int):
    return [(ci, fr, fc) for ci in range(c) for fr in range(kh) for fc in range(kw)]


def _epilogue_arr(acc, bias, shift, relu, bias_axis0=False):
    if bias is not None:
        b = bias.data.astype(np.int64)
        if bias_axis0:
            b = b.reshape((-1,) + (1,) * (acc.ndim - 1))
        acc = qadd_arr(acc, b)
    acc = qshift_arr(acc, shift)
    if relu:
        acc = np.maximum(acc, 0)
    return acc


def ref_conv2d(layer: Conv2d, x: np.ndarray) -> np.ndarray:
    o, c, kh, kw = layer.weight.shape
    _, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    wt = layer.weight.data.astype(np.int64)
    acc = None
    for ci, fr, fc in conv_tap_order(c, kh, kw):
        sl = x[ci, fr:fr + oh, fc:fc + ow]
        contrib = qmul_arr(sl[None, :, :], wt[:, ci, fr, fc][:, None, None])
        acc = contrib if acc is None else qadd_arr(acc, contrib)
    return _epilogue_arr(acc, layer.bias, layer.shift, layer.relu, bias_axis0=True)


def _conv1d_axis(x: np.ndarray, filt: np.ndarray, axis: int) -> np.ndarray:
    taps = filt.shape[0]
    out_len = x.shape[axis] - taps + 1
    acc = None
    for t in range(taps):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(t, t + out_len)
        contrib = qmul_arr(x[tuple(idx)], int(filt[t]))
        acc = contrib if acc is None else qadd_arr(acc, contrib)
    return acc


def ref_separated_triple(layer: SeparatedTripleConv, x: np.ndarray) -> np.ndarray:
    y = _conv1d_axis(x, layer.f_ch.data.astype(np.int64), 0)
    y = _conv1d_axis(y, layer.f_row.data.astype(np.int64), 1)
    y = _conv1d_axis(y, layer.f_col.data.astype(np.int64), 2)
    return _epilogue_arr(y, layer.bias, layer.shift, layer.relu, bias_axis0=True)


def _dense_fold(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    n = w.shape[1]
    acc = None
    for cidx in range(n):
        contrib = qmul_arr(w[:, cidx], int(x[cidx]))
        acc = contrib if acc is None else qadd_arr(acc, contrib)
    return acc


def ref_dense(layer: DenseFC, x: np.ndarray) -> np.ndarray:
    acc = _dense_fold(layer.weight.data.astype(np.int64), x.reshape(-1))
    return _epilogue_arr(acc, layer.bias, layer.shift, layer.relu)


def ref_separated_pair(layer: SeparatedPairFC, x: np.ndarray) -> np.ndarray:
    mid = _dense_fold(layer.b.data.astype(np.int64), x.reshape(-1))
    acc = _dense_fold(layer.a.data.astype(np.int64), mid)
    return _epilogue_arr(acc, layer.bias, layer.shift, layer.relu)


def ref_sparse(layer: SparseFC, x: np.ndarray) -> np.ndarray:
    xs = x.reshape(-1)
    w = layer.weight
    m = w.m
    out = np.zeros(m, dtype=np.int64)
    if layer.bias is not None:
        out[:] = layer.bias.data
    for r in range(m):
        acc = int(out[r])
        for j in range(int(w.offsets[r]), int(w.offsets[r + 1])):
            acc = qadd(acc, qmul(int(w.vals[j]), int(xs[w.cols[j]])))
        out[r] = acc
    return _epilogue_arr(out, None, layer.shift, layer.relu)


_REF = {
    "conv2d": ref_conv2d,
    "conv1d_separated_triple": ref_separated_triple,
    "fc_dense": ref_dense,
    "fc_sparse": ref_sparse,
    "fc_separated_pair": ref_separated_pair,
}


def reference_infer(net: NetworkModel, inp: FixedTensor) -> FixedTensor:
    """Continuous-power reference inference; the crash-consistency oracle.

    Pure function of (net, input): no device interaction, deterministic.
    Returns the flattened class scores as a 1-D tensor.
    """
    if tuple(inp.shape) != tuple(net.input_shape):
        raise ModelError(f"input shape {inp.shape} != network input {net.input_shape}")
    x = inp.data.astype(np.int64)
    for lay in net.layers:
        x = _REF[lay.kind](lay, x)
    scores = x.reshape(-1).astype(np.int16)
    return FixedTensor(scores)


# -- dataset ------------------------------------------------------------


@dataclass(frozen=True)
class LabeledDataset:
    """Raw Q1.15 feature tensors plus integer class labels."""

    features: np.ndarray  # int16, shape (count, *dims)
    labels: np.ndarray  # int64, shape (count,)
    class_count: int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.int16)
        l = np.asarray(self.labels, dtype=np.int64)
        if f.shape[0] != l.shape[0]:
            raise ModelError("feature/label counts disagree")
        if f.shape[0] == 0:
            raise ModelError("dataset is empty")
        if l.min() < 0 or l.max() >= self.class_count:
            raise ModelError("label outside class range")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", l)

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def sample(self, i: int) -> FixedTensor:
        return FixedTensor(self.features[i])


def evaluate(net: NetworkModel, dataset: LabeledDataset, interesting_class: int):
    """Accuracy plus true positive/negative rates for one class of interest.

    t_p is the fraction of interesting-class samples classified as
    interesting; t_n the fraction of other samples classified as not
    interesting. Argmax ties resolve to the lowest class index. A rate over
    an empty group is vacuously 1.0.
    """
    if not (0 <= interesting_class < net.class_count):
        raise ModelError("interesting_class out of range")
    preds = np.array(
        [int(np.argmax(reference_infer(net, dataset.sample(i)).data)) for i in range(len(dataset))]
    )
    labels = dataset.labels
    correct = preds == labels
    pos = labels == interesting_class
    neg = ~pos
    tp = float(np.mean(preds[pos] == interesting_class)) if pos.any() else 1.0
    tn = float(np.mean(preds[neg] != interesting_class)) if neg.any() else 1.0
    return {
        "accuracy": float(np.mean(correct)),
        "t_p": tp,
        "t_n": tn,
    }


# -- model archive (manifest + little-endian raw weight blocks) ----------

_MODEL_MAGIC = b"IQN1"
_DATA_MAGIC = b"IQD1"

_DTYPES = {"i2": "<i2", "i8": "<i8"}


class _BlobWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.table: list[dict] = []
        self.offset = 0

    def add(self, arr: np.ndarray, tag: str) -> int:
        raw = np.ascontiguousarray(arr.astype(_DTYPES[tag])).tobytes()
        self.table.append({"offset": self.offset, "bytes": len(raw), "dtype": tag})
        self.chunks.append(raw)
        self.offset += len(raw)
        return len(self.table) - 1


def _tensor_manifest(t: FixedTensor, bw: _BlobWriter) -> dict:
    return {"blob": bw.add(t.data, "i2"), "shape": list(t.shape), "scale": t.scale}


def _layer_manifest(lay, bw: _BlobWriter) -> dict:
    m = {"kind": lay.kind, "name": lay.name, "shift": lay.shift, "relu": lay.relu}
    if lay.kind == "fc_sparse":
        w = lay.weight
        m["m"], m["n"] = w.m, w.n
        m["scale"] = w.scale
        m["offsets"] = bw.add(w.offsets, "i8")
        m["cols"] = bw.add(w.cols, "i8")
        m["vals"] = bw.add(w.vals, "i2")
        if lay.bias is not None:
            m["bias"] = _tensor_manifest(lay.bias, bw)
    else:
        for key, t in lay.weights().items():
            m[key] = _tensor_manifest(t, bw)
    return m


def _read_blob(blobs: bytes, table: list, idx: int) -> np.ndarray:
    try:
        entry = table[idx]
    except (IndexError, TypeError):
        raise ModelError(f"manifest references missing blob {idx}") from None
    off, nbytes, tag = entry["offset"], entry["bytes"], entry["dtype"]
    if off + nbytes > len(blobs):
        raise ModelError("archive truncated: blob extends past end of file")
    return np.frombuffer(blobs[off:off + nbytes], dtype=_DTYPES[tag]).copy()


def _tensor_from_manifest(m: dict, blobs: bytes, table: list) -> FixedTensor:
    blob = _read_blob(blobs, table, m["blob"])
    try:
        arr = blob.reshape(m["shape"])
    except ValueError:
        raise ModelError(
            f"manifest shape {m['shape']} does not match stored blob of {blob.size} words"
        ) from None
    return FixedTensor(arr.astype(np.int16), int(m["scale"]))


def save_model(net: NetworkModel, path) -> None:
    bw = _BlobWriter()
    layers = [_layer_manifest(lay, bw) for lay in net.layers]
    manifest = {
        "input_shape": list(net.input_shape),
        "class_count": net.class_count,
        "layers": layers,
        "blobs": bw.table,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        for chunk in bw.chunks:
            fh.write(chunk)


def load_model(path) -> NetworkModel:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != _MODEL_MAGIC:
        raise ModelError("not a model archive")
    (mlen,) = struct.unpack("<I", raw[4:8])
    if 8 + mlen > len(raw):
        raise ModelError("archive truncated: manifest extends past end of file")
    try:
        manifest = json.loads(raw[8:8 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelError(f"malformed manifest: {e}") from None
    blobs = raw[8 + mlen:]
    table = manifest.get("blobs", [])
    layers = []
    for lm in manifest["layers"]:
        name = lm.get("name", "?")
        try:
            layers.append(_build_layer(lm, blobs, table))
        except (ModelError, ValueError, KeyError) as e:
            raise ModelError(f"layer {name!r}: {e}") from None
    try:
        return NetworkModel(tuple(layers), tuple(manifest["input_shape"]),
                            int(manifest["class_count"]))
    except ModelError as e:
        raise ModelError(f"archive validation failed: {e}") from None


def _build_layer(lm: dict, blobs: bytes, table: list):
    kind, name = lm["kind"], lm["name"]
    common = {"name": name, "shift": int(lm["shift"]), "relu": bool(lm["relu"])}
    bias = _tensor_from_manifest(lm["bias"], blobs, table) if "bias" in lm else None
    if kind == "conv2d":
        return Conv2d(weight=_tensor_from_manifest(lm["weight"], blobs, table),
                      bias=bias, **common)
    if kind == "conv1d_separated_triple":
        return SeparatedTripleConv(
            f_ch=_tensor_from_manifest(lm["f_ch"], blobs, table),
            f_row=_tensor_from_manifest(lm["f_row"], blobs, table),
            f_col=_tensor_from_manifest(lm["f_col"], blobs, table),
            bias=bias, **common)
    if kind == "fc_dense":
        return DenseFC(weight=_tensor_from_manifest(lm["weight"], blobs, table),
                       bias=bias, **common)
    if kind == "fc_separated_pair":
        return SeparatedPairFC(a=_tensor_from_manifest(lm["a"], blobs, table),
                               b=_tensor_from_manifest(lm["b"], blobs, table),
                               bias=bias, **common)
    if kind == "fc_sparse":
        sm = SparseMatrix(
            int(lm["m"]), int(lm["n"]),
            _read_blob(blobs, table, lm["offsets"]),
            _read_blob(blobs, table, lm["cols"]),
            _read_blob(blobs, table, lm["vals"]).astype(np.int16),
            int(lm["scale"]),
        )
        return SparseFC(weight=sm, bias=bias, **common)
    raise ModelError(f"unknown layer kind {kind!r}")


def save_dataset(ds: LabeledDataset, path) -> None:
    dims = ds.features.shape[1:]
    with open(path, "wb") as fh:
        fh.write(_DATA_MAGIC)
        fh.write(struct.pack("<IBH", len(ds), len(dims), ds.class_count))
        fh.write(struct.pack(f"<{len(dims)}H", *dims))
        fh.write(np.ascontiguousarray(ds.features.astype("<i2")).tobytes())
        fh.write(np.ascontiguousarray(ds.labels.astype("<u2")).tobytes())


def load_dataset(path) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 11 or raw[:4] != _DATA_MAGIC:
        raise ModelError("not a dataset file")
    count, ndim, class_count = struct.unpack("<IBH", raw[4:11])
    hdr_end = 11 + 2 * ndim
    dims = struct.unpack(f"<{ndim}H", raw[11:hdr_end])
    n_feat = count * _flat(dims)
    feat_end = hdr_end + 2 * n_feat
    lab_end = feat_end + 2 * count
    if lab_end > len(raw):
        raise ModelError("dataset truncated")
    feats = np.frombuffer(raw[hdr_end:feat_end], dtype="<i2").reshape((count,) + dims)
    labels = np.frombuffer(raw[feat_end:lab_end], dtype="<u2").astype(np.int64)
    return LabeledDataset(feats.copy(), labels, class_count)


# -- static energy estimate (used by the compression search) -------------


def estimate_inference_energy_uj(net: NetworkModel, costs) -> float:
    """Analytic per-inference energy estimate: operation counts times
    per-operation energy.

    Per MAC: two non-volatile reads (weight, activation), one multiply, one
    add. Per output element: one non-volatile write plus two register ops
    for the epilogue. Deliberately simpler than the simulated runtimes; it
    is a selection metric, not a measurement.
    """
    shapes = net.activation_shapes()
    e = 0.0
    for i, lay in enumerate(net.layers):
        macs = lay.mac_count(shapes[i])
        outs = _flat(shapes[i + 1])
        e += macs * (2 * costs.nonvolatile_read + costs.multiply + costs.arithmetic)
        e += outs * (costs.nonvolatile_write + 2 * costs.arithmetic)
    return e
