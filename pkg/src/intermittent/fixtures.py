"""Deterministic fixture networks, datasets, and micro-workloads.

The three inference fixtures mirror the layer mix of real deployed nets
(convolution front end, dense and sparse fully-connected layers, separated
factorizations) but are sized so a metered simulation finishes in
milliseconds. Weights are generated from fixed seeds, never trained.
"""

from __future__ import annotations

import numpy as np

from .device import Device
from .fixedpoint import FixedTensor, SparseMatrix, qadd, qmul
from .model import (
    Conv2d,
    DenseFC,
    LabeledDataset,
    NetworkModel,
    SeparatedPairFC,
    SeparatedTripleConv,
    SparseFC,
    reference_infer,
)
from .runtime import RunStats, TiledLoop, run_intermittent, run_tiled_loop


def _t(rng, shape, lo=-0.45, hi=0.45):
    return FixedTensor.from_float(rng.uniform(lo, hi, size=shape))


def dense_conv_net() -> NetworkModel:
    """Conv-heavy fixture: conv2d -> dense FC -> dense FC."""
    rng = np.random.default_rng(1001)
    return NetworkModel(
        (
            Conv2d("conv1", _t(rng, (2, 1, 3, 3)), _t(rng, (2,), -0.1, 0.1), shift=1),
            DenseFC("fc1", _t(rng, (16, 32)), _t(rng, (16,), -0.1, 0.1)),
            DenseFC("out", _t(rng, (4, 16)), None, relu=False),
        ),
        input_shape=(1, 6, 6),
        class_count=4,
    )


def mixed_net() -> NetworkModel:
    """One of each compressed layer kind: conv, separated triple, sparse FC,
    separated pair, dense output."""
    rng = np.random.default_rng(2002)
    sparse_w = SparseMatrix.from_dense(_t(rng, (6, 9)), threshold=0.18)
    return NetworkModel(
        (
            Conv2d("conv1", _t(rng, (2, 2, 2, 2)), None, shift=1),
            SeparatedTripleConv("sep1", _t(rng, (2,)), _t(rng, (2,)), _t(rng, (2,)),
                                _t(rng, (1,), -0.1, 0.1)),
            SparseFC("sfc1", sparse_w, _t(rng, (6,), -0.1, 0.1)),
            SeparatedPairFC("pair1", _t(rng, (5, 3)), _t(rng, (3, 6)), None),
            DenseFC("out", _t(rng, (3, 5)), None, relu=False),
        ),
        input_shape=(2, 5, 5),
        class_count=3,
    )


def sparse_chain_net() -> NetworkModel:
    """Sparse-FC-heavy fixture."""
    rng = np.random.default_rng(3003)
    s1 = SparseMatrix.from_dense(_t(rng, (8, 10)), threshold=0.2)
    return NetworkModel(
        (
            DenseFC("fc1", _t(rng, (10, 16)), _t(rng, (10,), -0.1, 0.1)),
            SparseFC("sfc1", s1, None),
            DenseFC("out", _t(rng, (4, 8)), None, relu=False),
        ),
        input_shape=(16,),
        class_count=4,
    )


FIXTURE_NETS = {
    "dense_conv": dense_conv_net,
    "mixed": mixed_net,
    "sparse_chain": sparse_chain_net,
}


def tiny_conv_net() -> NetworkModel:
    rng = np.random.default_rng(4004)
    return NetworkModel(
        (Conv2d("c", _t(rng, (1, 1, 2, 2)), _t(rng, (1,), -0.1, 0.1), relu=False),),
        input_shape=(1, 3, 3),
        class_count=4,
    )


def tiny_dense_net() -> NetworkModel:
    rng = np.random.default_rng(5005)
    return NetworkModel(
        (DenseFC("d", _t(rng, (3, 4)), _t(rng, (3,), -0.1, 0.1), relu=False),),
        input_shape=(4,),
        class_count=3,
    )


def tiny_sparse_net(m=4, n=4, density=0.5, seed=6006) -> NetworkModel:
    rng = np.random.default_rng(seed)
    dense = rng.uniform(-0.45, 0.45, size=(m, n))
    dense[rng.random((m, n)) >= density] = 0.0
    w = SparseMatrix.from_dense(FixedTensor.from_float(dense))
    return NetworkModel(
        (SparseFC("s", w, None, relu=False),),
        input_shape=(n,),
        class_count=m,
    )


def fixture_input(net: NetworkModel, seed: int = 0) -> FixedTensor:
    rng = np.random.default_rng(9000 + seed)
    return FixedTensor.from_float(rng.uniform(-0.5, 0.5, size=net.input_shape))


def fixture_dataset(net: NetworkModel, n: int = 48, seed: int = 0,
                    flip_fraction: float = 0.15) -> LabeledDataset:
    """Labeled data whose labels are the net's own predictions with a
    seeded fraction flipped, so fixture accuracy is realistic but known."""
    rng = np.random.default_rng(7000 + seed)
    feats = FixedTensor.from_float(
        rng.uniform(-0.5, 0.5, size=(n,) + tuple(net.input_shape))
    ).data
    labels = np.array(
        [int(np.argmax(reference_infer(net, FixedTensor(feats[i])).data)) for i in range(n)]
    )
    flip = rng.random(n) < flip_fraction
    labels[flip] = (labels[flip] + 1) % net.class_count
    # every class present, so per-class rates are never vacuous
    for c in range(net.class_count):
        if not np.any(labels == c):
            labels[c % n] = c
    return LabeledDataset(feats, labels, net.class_count)


# -- dot-product micro-workload (the task-tiling comparison loop) ---------


def dot_product_data(n: int = 20, seed: int = 0):
    rng = np.random.default_rng(8000 + seed)
    xs = FixedTensor.from_float(rng.uniform(-0.3, 0.3, size=n)).data.tolist()
    ws = FixedTensor.from_float(rng.uniform(-0.3, 0.3, size=n)).data.tolist()
    return xs, ws


def dot_product_oracle(xs, ws) -> int:
    acc = 0
    for x, w in zip(xs, ws):
        acc = qadd(acc, qmul(w, x))
    return acc


class DotProductLayout:
    """NV layout for the standalone dot-product loop workloads."""

    def __init__(self, n: int, tile: int = 8):
        self.log_capacity = 2 * tile + 16
        self.ctl = 0
        self.log_base = 1
        self.cursor = self.log_base + 2 + 2 * self.log_capacity
        self.acc = self.cursor + 1
        self.rd = self.acc + 1
        self.wr = self.rd + 1
        self.backup = self.wr + 1
        self.xs = self.backup + 1
        self.ws = self.xs + n
        self.n = n

    def flash(self, device: Device, xs, ws) -> None:
        for i, v in enumerate(xs):
            device.mem.poke_nv(self.xs + i, v)
        for i, v in enumerate(ws):
            device.mem.poke_nv(self.ws + i, v)


def tiled_dot_product(xs, ws, tile: int, device: Device, *, stall_limit: int = 3):
    """Dot product as a task-tiled loop; accumulator is task-shared state."""
    lay = DotProductLayout(len(xs), tile)
    lay.flash(device, xs, ws)
    dev = device

    def body(ctx, i):
        x = dev.read_nv(lay.xs + i)
        w = dev.read_nv(lay.ws + i)
        dev.mul()
        f = qmul(w, x)
        acc = ctx.read(lay.acc)
        dev.alu()
        ctx.write(lay.acc, qadd(acc, f))
        dev.ctrl()

    loop = TiledLoop(total=len(xs), tile=tile, body=body, cursor_addr=lay.cursor)
    stats = run_tiled_loop(
        loop, device, ctl_addr=lay.ctl, log_base=lay.log_base,
        log_capacity=lay.log_capacity, stall_limit=stall_limit,
    )
    return device.mem.peek_nv(lay.acc), stats


def tiled_task_cost_uj(costs, tile: int) -> float:
    """Analytic energy of one full dot-product task at the given tile size.

    Matches the metering of :func:`tiled_dot_product`: task entry (task
    pointer read, prologue, cursor read), per-iteration body with the
    accumulator privatized into the redo log on first write, the cursor and
    task-pointer log entries, the two-phase commit, and the transition.
    """
    c = costs
    first_iter = 3 * c.nonvolatile_read + c.multiply + c.arithmetic \
        + 3 * c.nonvolatile_write + c.control
    later_iter = 3 * c.nonvolatile_read + c.multiply + c.arithmetic \
        + c.nonvolatile_write + c.control
    entry = c.nonvolatile_read + c.control + 2 * c.volatile_write + c.nonvolatile_read
    log_new_entry = 3 * c.nonvolatile_write
    commit = 2 * c.nonvolatile_write + 3 * (2 * c.nonvolatile_read + c.nonvolatile_write)
    return (entry + first_iter + (tile - 1) * later_iter
            + 2 * log_new_entry + commit + c.task_transition)


def tiled_iteration_cost_uj(costs) -> float:
    """Steady-state energy of one dot-product loop iteration under tiling."""
    c = costs
    return 3 * c.nonvolatile_read + c.multiply + c.arithmetic + c.nonvolatile_write + c.control


def loopcont_dot_product(xs, ws, device: Device, *, stall_limit: int = 3):
    """Dot product with loop continuation.

    The accumulator is a read-modify-write reduction, so each iteration is
    made idempotent with the sparse undo-logging protocol: back up the
    accumulator, advance the read index, write the update in place, advance
    the write index. The write index doubles as the non-volatile loop
    index: it is updated at iteration end and never reset, so execution
    resumes at the interrupted iteration.
    """
    lay = DotProductLayout(len(xs))
    lay.flash(device, xs, ws)
    dev = device
    n = len(xs)
    stats = RunStats(runtime="sonic")
    stats.ideal_steps = n

    def program():
        wr = dev.read_nv(lay.wr)
        rd = dev.read_nv(lay.rd)
        for j in range(wr, n):
            stats.steps += 1
            if rd == j:
                orig = dev.read_nv(lay.acc)
                dev.write_nv(lay.backup, orig)
                rd = j + 1
                dev.write_nv(lay.rd, rd)
                stats.undo_backups += 1
            else:  # interrupted mid-update: recompute from the backup
                orig = dev.read_nv(lay.backup)
            x = dev.read_nv(lay.xs + j)
            w = dev.read_nv(lay.ws + j)
            dev.mul()
            dev.alu()
            dev.write_nv(lay.acc, qadd(orig, qmul(w, x)))
            stats.undo_writes += 1
            dev.write_nv(lay.wr, j + 1)
            dev.ctrl()

    def probe():
        return (dev.mem.peek_nv(lay.wr), dev.mem.peek_nv(lay.rd))

    run_intermittent(dev, stats, program, probe, stall_limit)
    return dev.mem.peek_nv(lay.acc), stats


def loopcont_iteration_cost_uj(costs) -> float:
    """Steady-state energy of one loop-continuation dot-product iteration:
    three reads (accumulator, x, w), four writes (backup, read index,
    accumulator, write index), multiply, add, loop control."""
    c = costs
    return (3 * c.nonvolatile_read + 4 * c.nonvolatile_write
            + c.multiply + c.arithmetic + c.control)
