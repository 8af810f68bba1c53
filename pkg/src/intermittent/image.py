"""Non-volatile memory layout for a network on the simulated device.

The image places, in order: a control block (loop state, task pointer,
calibration result), a redo-log region, three equal activation regions, and
then all layer weights. Control and activations sit at low addresses so
that logged addresses always fit in one 16-bit word; weights are read-only
and never logged. Weights are flashed with unmetered writes (programming
happens before deployment); everything else starts zeroed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .device import Device, MemorySpace
from .model import NetworkModel, _flat

# named control words, one NV word each
CTL_WORDS = (
    "cur_task",    # task-graph program counter
    "cursor",      # tiled-loop progress cursor
    "layer",       # index of the layer being executed
    "pos",         # filter position / pass index (also the sparse phase)
    "idx",         # inner loop index
    "role",        # double-buffer role tag: which free slot is the destination
    "rd_idx",      # sparse undo-logging read index
    "wr_idx",      # sparse undo-logging write index
    "backup",      # sparse undo-logging canonical backup slot
    "done",        # completion flag
    "cal_tile",    # calibrated accelerator tile size
    "cal_valid",   # calibration result valid flag
    "cal_attempt", # calibration attempt-in-progress marker
)


@dataclass
class _LayerAddrs:
    arrays: dict  # name -> (base_addr, length)


class NetImage:
    """Address plan plus flashing for one network."""

    def __init__(self, net: NetworkModel, *, log_capacity: int = 64,
                 cal_scratch_words: int = 1024):
        self.net = net
        self.log_capacity = log_capacity
        addr = 0
        self.ctl = {}
        for name in CTL_WORDS:
            self.ctl[name] = addr
            addr += 1
        self.log_base = addr
        addr += 2 + 2 * log_capacity  # flag, count, then (addr, value) pairs
        self.arena_elems = max(net.max_activation_elems(), 1)
        self.arena = [addr, addr + self.arena_elems, addr + 2 * self.arena_elems]
        addr += 3 * self.arena_elems
        self.cal_scratch = addr  # probe area for accelerator calibration
        self.cal_scratch_words = cal_scratch_words
        addr += cal_scratch_words
        self.weights_base = addr
        self.layers: list[_LayerAddrs] = []
        for lay in net.layers:
            arrays = {}
            for name, arr in self._layer_arrays(lay):
                arrays[name] = (addr, len(arr))
                addr += len(arr)
            self.layers.append(_LayerAddrs(arrays))
        self.total_words = addr

    @staticmethod
    def _layer_arrays(lay):
        out = []
        if lay.kind == "fc_sparse":
            w = lay.weight
            out.append(("offsets", w.offsets.astype(np.int64).tolist()))
            out.append(("cols", w.cols.astype(np.int64).tolist()))
            out.append(("vals", w.vals.astype(np.int64).tolist()))
            if lay.bias is not None:
                out.append(("bias", lay.bias.data.reshape(-1).tolist()))
        else:
            for name, t in lay.weights().items():
                out.append((name, t.data.reshape(-1).astype(np.int64).tolist()))
        return out

    def flash(self, mem: MemorySpace) -> None:
        if self.total_words > mem.nonvolatile_words:
            raise ValueError(
                f"image needs {self.total_words} NV words, device has {mem.nonvolatile_words}"
            )
        for lay, plan in zip(self.net.layers, self.layers):
            for name, arr in self._layer_arrays(lay):
                base, _ = plan.arrays[name]
                for i, v in enumerate(arr):
                    mem.poke_nv(base + i, int(v))
        for name in CTL_WORDS:
            mem.poke_nv(self.ctl[name], 0)

    def weight_addr(self, layer_idx: int, name: str) -> int:
        return self.layers[layer_idx].arrays[name][0]

    def load_input(self, device: Device, tensor, slot: int = 0) -> None:
        """Place the input activations (sensor data; unmetered)."""
        flat = np.asarray(tensor.data).reshape(-1)
        if len(flat) != _flat(self.net.input_shape):
            raise ValueError("input does not match network input shape")
        base = self.arena[slot]
        for i, v in enumerate(flat):
            device.mem.poke_nv(base + i, int(v))

    def read_vector(self, device: Device, slot: int, n: int) -> list[int]:
        base = self.arena[slot]
        return [device.mem.peek_nv(base + i) for i in range(n)]


# -- stage plan -----------------------------------------------------------
#
# Layers decompose into execution stages: conv2d and FC layers are one
# stage; a separated pair is two dense stages; a separated triple is three
# 1-D convolution stages. Within a layer, only the final stage applies the
# bias / scale shift / ReLU epilogue. All runtimes execute the same stage
# sequence (their loop orders inside a stage differ, their arithmetic does
# not).


@dataclass(frozen=True)
class Stage:
    layer_idx: int
    kind: str  # "conv2d" | "conv1d" | "dense" | "sparse"
    in_shape: tuple
    out_shape: tuple
    weight_name: str | None = None
    axis: int = 0  # for conv1d: which input axis the filter slides along
    taps: int = 0  # conv taps per output element / dense input width
    bias_name: str | None = None
    shift: int = 0
    relu: bool = False
    epilogue: bool = False


def plan_stages(net: NetworkModel) -> list[Stage]:
    stages: list[Stage] = []
    shape = net.input_shape
    for li, lay in enumerate(net.layers):
        out = lay.out_shape(shape)
        bias = "bias" if lay.bias is not None else None
        if lay.kind == "conv2d":
            o, c, kh, kw = lay.weight.shape
            stages.append(Stage(li, "conv2d", shape, out, "weight",
                                taps=c * kh * kw, bias_name=bias,
                                shift=lay.shift, relu=lay.relu, epilogue=True))
        elif lay.kind == "conv1d_separated_triple":
            cur = shape
            filts = [("f_ch", lay.f_ch, 0), ("f_row", lay.f_row, 1), ("f_col", lay.f_col, 2)]
            for j, (name, f, axis) in enumerate(filts):
                nxt = list(cur)
                nxt[axis] = cur[axis] - f.shape[0] + 1
                last = j == 2
                stages.append(Stage(li, "conv1d", tuple(cur), tuple(nxt), name,
                                    axis=axis, taps=f.shape[0],
                                    bias_name=bias if last else None,
                                    shift=lay.shift if last else 0,
                                    relu=lay.relu if last else False,
                                    epilogue=last))
                cur = tuple(nxt)
        elif lay.kind == "fc_dense":
            m, n = lay.weight.shape
            stages.append(Stage(li, "dense", shape, out, "weight", taps=n,
                                bias_name=bias, shift=lay.shift, relu=lay.relu,
                                epilogue=True))
        elif lay.kind == "fc_separated_pair":
            m, k = lay.a.shape
            _, n = lay.b.shape
            stages.append(Stage(li, "dense", shape, (k,), "b", taps=n))
            stages.append(Stage(li, "dense", (k,), (m,), "a", taps=k,
                                bias_name=bias, shift=lay.shift, relu=lay.relu,
                                epilogue=True))
        elif lay.kind == "fc_sparse":
            stages.append(Stage(li, "sparse", shape, out, None,
                                bias_name=bias, shift=lay.shift, relu=lay.relu,
                                epilogue=True))
        else:
            raise ValueError(f"unknown layer kind {lay.kind!r}")
        shape = out
    return stages


def two_slot_plan(stages) -> list[tuple[int, int]]:
    """(in_slot, out_slot) per stage for runtimes that ping-pong two regions."""
    plan = []
    src = 0
    for _ in stages:
        dst = 1 - src
        plan.append((src, dst))
        src = dst
    return plan


def stage_out_elems(stage: Stage) -> int:
    return _flat(stage.out_shape)

