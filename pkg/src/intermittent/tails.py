"""Simulated vector accelerator with DMA, on top of loop continuation.

The accelerator reads and writes only the device's small volatile operating
buffer; inputs are DMA-ed in from non-volatile memory and results DMA-ed
back out. Supported operations are vector MAC, 1-D FIR convolution (with a
partial-accumulate input), vector right-shift, and dot product; vector
left-shift and scalar multiply are not supported, so activation scaling
runs in software. Every operation uses the same saturating Q1.15 fold as
the scalar kernels (element-wise 16-bit saturation), so accelerated and
software outputs are bit-identical.

Tile size is bound once at run time: a calibration task attempts a full
DMA-in, FIR, DMA-out round trip and, each time power fails before it
completes, re-executes with the tile halved. The first tile that survives a
charge cycle is persisted (with a valid flag) and reused thereafter.

Layer strategies: 2-D convolutions decompose into accumulated 1-D FIR
passes over filter rows; 1-D filters along a non-contiguous axis use the
dot-product operation per output element instead; dense FC rows use vector
MAC over column chunks; sparse FC falls back to the software
undo-logging path unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

from .device import Device
from .fixedpoint import qadd, qmul, qshift
from .image import NetImage, stage_out_elems
from .model import NetworkModel
from .runtime import RunStats, _coords, _flat_idx, _prologue, run_intermittent
from .sonic import SonicRunner


class UnusableAccelerator(RuntimeError):
    """The energy buffer cannot pay for even a one-element round trip."""


@dataclass(frozen=True)
class AcceleratorConfig:
    operating_buffer_bytes: int = 4096  # volatile; the accelerator sees only this
    invocation_uj: float = 8.0
    per_element_uj: float | None = None  # None: use the cost model's accel_op

    SUPPORTED_OPS = ("vector_mac", "fir_conv", "vector_rshift", "dot_product")
    UNSUPPORTED_OPS = ("vector_lshift", "scalar_multiply")

    @property
    def operating_buffer_words(self) -> int:
        return self.operating_buffer_bytes // 2

    def element_cost(self, costs) -> float:
        return self.per_element_uj if self.per_element_uj is not None else costs.accel_op

    def max_roundtrip_tile(self) -> int:
        # calibration probe holds a signal tile and an output tile
        return self.operating_buffer_words // 2


@dataclass
class CalibrationResult:
    tile: int
    valid: bool
    attempts: tuple[int, ...] = ()


# -- DMA -------------------------------------------------------------------


def dma(device: Device, src_region: str, src_base: int, dst_region: str,
        dst_base: int, n: int) -> None:
    """Copy n words between regions: fixed setup cost plus one DMA word
    cost per word. A failure mid-transfer leaves the destination partially
    written; callers keep DMA targets in scratch that a retry fully
    rewrites."""
    mem = device.mem
    device.spend(device.costs.dma_setup, "dma_setup")
    rd = mem.peek_v if src_region == "volatile" else mem.peek_nv
    wr = mem.poke_v if dst_region == "volatile" else mem.poke_nv
    for i in range(n):
        device.dma_word()
        wr(dst_base + i, rd(src_base + i))


# -- accelerator tile operations -------------------------------------------
#
# Operands live in the volatile operating buffer; the block is a single
# failure boundary. Access-recorder marks bracket each block so tests can
# assert the accelerator never touches non-volatile memory.


def _block(device, acfg, elements):
    device.accel_block(elements, acfg.invocation_uj, acfg.element_cost(device.costs))
    if device.recorder is not None:
        device.recorder.mark("accel_begin", elements)


def _block_end(device):
    if device.recorder is not None:
        device.recorder.mark("accel_end")


def fir_conv_tile(device: Device, acfg: AcceleratorConfig, sig_base: int,
                  sig_len: int, filt_base: int, taps: int, out_base: int,
                  acc_base: int | None = None) -> None:
    """out[j] = fold_k qadd(partial_j, qmul(sig[j+k], filt[k])), k ascending.

    With acc_base the fold seeds from the partial tile (accumulating FIR);
    otherwise the first tap initializes the fold.
    """
    out_len = sig_len - taps + 1
    _block(device, acfg, out_len * taps)
    pv, wv = device.mem.peek_v, device.mem.poke_v
    for j in range(out_len):
        acc = pv(acc_base + j) if acc_base is not None else None
        for t in range(taps):
            f = qmul(pv(sig_base + j + t), pv(filt_base + t))
            acc = f if acc is None else qadd(acc, f)
        wv(out_base + j, acc)
    _block_end(device)


def vector_mac_tile(device: Device, acfg: AcceleratorConfig, a_base: int,
                    b_base: int, n: int, carry_in: int | None = None) -> int:
    """Saturating multiply-accumulate of two volatile vectors."""
    _block(device, acfg, n)
    pv = device.mem.peek_v
    acc = carry_in
    for i in range(n):
        f = qmul(pv(a_base + i), pv(b_base + i))
        acc = f if acc is None else qadd(acc, f)
    _block_end(device)
    return 0 if acc is None else acc


def dot_product_tile(device: Device, acfg: AcceleratorConfig, a_base: int,
                     b_base: int, n: int) -> int:
    return vector_mac_tile(device, acfg, a_base, b_base, n)


def vector_rshift_tile(device: Device, acfg: AcceleratorConfig, base: int,
                       n: int, shift: int) -> None:
    """In-place right shift; left shifts are not supported in hardware."""
    if shift < 0:
        raise ValueError("vector left-shift is not an accelerator operation")
    _block(device, acfg, n)
    pv, wv = device.mem.peek_v, device.mem.poke_v
    for i in range(n):
        wv(base + i, qshift(pv(base + i), shift))
    _block_end(device)


# -- one-time calibration ----------------------------------------------------


def roundtrip_cost_uj(costs, acfg: AcceleratorConfig, tile: int) -> float:
    """Energy of one DMA-in + unit-tap FIR + DMA-out probe at a tile size."""
    return (2 * (costs.dma_setup + tile * costs.dma_word)
            + acfg.invocation_uj + tile * acfg.element_cost(costs))


def calibration_attempt_cost_uj(costs, acfg: AcceleratorConfig, tile: int,
                                success: bool = False) -> float:
    """One calibration attempt: control-word reads, the tile update, the
    attempt marker, and the probe round trip. With ``success`` the
    valid-flag write is included; that write is the durability point (the
    trailing attempt-marker clear may spill into the next cycle
    harmlessly, since a set valid flag short-circuits re-entry)."""
    e = 3 * costs.nonvolatile_read + 2 * costs.nonvolatile_write
    e += roundtrip_cost_uj(costs, acfg, tile)
    if success:
        e += costs.nonvolatile_write
    return e


class CalibrationContext:
    """NV words used by calibration plus a scratch area for the probe."""

    def __init__(self, tile_addr: int, valid_addr: int, attempt_addr: int,
                 scratch_base: int, scratch_words: int):
        self.tile_addr = tile_addr
        self.valid_addr = valid_addr
        self.attempt_addr = attempt_addr
        self.scratch_base = scratch_base
        self.scratch_words = scratch_words

    @classmethod
    def standalone(cls, scratch_words: int = 1024) -> "CalibrationContext":
        return cls(0, 1, 2, 3, scratch_words)

    @classmethod
    def for_image(cls, image: NetImage) -> "CalibrationContext":
        ctl = image.ctl
        return cls(ctl["cal_tile"], ctl["cal_valid"], ctl["cal_attempt"],
                   image.cal_scratch, image.cal_scratch_words)


def _calibrate_step(device: Device, ctx: CalibrationContext,
                    acfg: AcceleratorConfig, initial_tile: int,
                    attempts: list) -> int:
    """One power-cycle's worth of the calibration task. Returns the tile
    once the valid flag is set."""
    dev = device
    while True:
        if dev.read_nv(ctx.valid_addr):
            return dev.read_nv(ctx.tile_addr)
        tile = dev.read_nv(ctx.tile_addr)
        attempted = dev.read_nv(ctx.attempt_addr)
        cap = min(initial_tile, acfg.max_roundtrip_tile(), ctx.scratch_words)
        if tile == 0 and not attempted:
            tile = cap
            dev.write_nv(ctx.tile_addr, tile)
        elif attempted:
            tile //= 2  # the previous attempt died before completing
            dev.write_nv(ctx.tile_addr, tile)
        if tile == 0:
            raise UnusableAccelerator(
                "tile size reached zero: the buffer cannot fund a one-element round trip"
            )
        attempts.append(tile)
        dev.write_nv(ctx.attempt_addr, 1)
        opbuf_sig = 0
        opbuf_out = tile
        dma(dev, "nonvolatile", ctx.scratch_base, "volatile", opbuf_sig, tile)
        fir_conv_tile(dev, acfg, opbuf_sig, tile, opbuf_sig, 1, opbuf_out)
        dma(dev, "volatile", opbuf_out, "nonvolatile", ctx.scratch_base, tile)
        dev.write_nv(ctx.valid_addr, 1)
        dev.write_nv(ctx.attempt_addr, 0)
        return tile


def calibrate(device: Device, *, acfg: AcceleratorConfig | None = None,
              initial_tile: int = 256, ctx: CalibrationContext | None = None,
              stats: RunStats | None = None, stall_limit: int = 3) -> CalibrationResult:
    """Determine the largest workable tile by halving, persist it, and
    return it; runs once per device (subsequent calls read the stored
    result)."""
    if initial_tile < 1:
        raise ValueError("initial tile must be >= 1")
    acfg = acfg or AcceleratorConfig()
    ctx = ctx or CalibrationContext.standalone()
    stats = stats or RunStats(runtime="calibrate")
    attempts: list[int] = []

    def program():
        return _calibrate_step(device, ctx, acfg, initial_tile, attempts)

    def probe():
        peek = device.mem.peek_nv
        return (peek(ctx.tile_addr), peek(ctx.valid_addr), peek(ctx.attempt_addr))

    tile = run_intermittent(device, stats, program, probe, stall_limit)
    return CalibrationResult(tile=tile, valid=True, attempts=tuple(attempts))


def invalidate_calibration(device: Device, ctx: CalibrationContext) -> None:
    """Manual invalidation for when the power environment changes."""
    device.mem.poke_nv(ctx.valid_addr, 0)
    device.mem.poke_nv(ctx.tile_addr, 0)
    device.mem.poke_nv(ctx.attempt_addr, 0)


# -- accelerated inference ---------------------------------------------------


def tails_slot_plan(stages):
    """Like the software plan but with merged passes: a conv2d pass covers
    one filter row (all its column taps), dense and 1-D stages compute
    their output in a single pass."""
    plan = []
    src = 0
    for stage in stages:
        free = tuple(sorted({0, 1, 2} - {src}))
        if stage.kind == "sparse":
            out = free[0]
            passes = 0
        else:
            if stage.kind == "conv2d":
                work = stage.in_shape[0] * (stage.in_shape[1] - stage.out_shape[1] + 1)
            else:
                work = 1
            passes = work + (1 if stage.epilogue else 0)
            out = free[(passes - 1) % 2]
        plan.append((src, free, out, passes))
        src = out
    return plan


class TailsRunner(SonicRunner):
    """Loop-continuation inference with DMA + accelerator inner loops."""

    runtime_name = "tails"

    def __init__(self, net, device, *, acfg: AcceleratorConfig | None = None,
                 initial_tile: int = 256, **kw):
        super().__init__(net, device, **kw)
        self.acfg = acfg or AcceleratorConfig()
        self.initial_tile = initial_tile
        self.plan = tails_slot_plan(self.stages)
        self.stats.runtime = "tails"
        self.stats.ideal_steps = 0  # known only after calibration fixes the tile
        self.cal_ctx = CalibrationContext.for_image(self.image)
        self._cal_attempts: list[int] = []

    # opbuf layout for layer work: filter row, then signal, then partials
    def _opbuf_layout(self, taps: int, tile: int):
        filt = 0
        sig = taps
        acc = sig + tile + taps - 1
        out = acc + tile
        return filt, sig, acc, out

    def _effective_tile(self, taps: int, cal_tile: int) -> int:
        # filter + signal(tile+taps-1) + partial(tile) + out(tile) must fit
        fit = (self.acfg.operating_buffer_words - 2 * taps + 1) // 3
        return max(1, min(cal_tile, fit))

    def run(self) -> RunStats:
        image = self.image
        ctl = image.ctl
        n_stages = len(self.stages)
        dev = self.dev

        def program():
            self.log.recover()
            tile = _calibrate_step(dev, self.cal_ctx, self.acfg,
                                   self.initial_tile, self._cal_attempts)
            if self.stats.ideal_steps == 0:
                self.stats.ideal_steps = self._tails_ideal_steps(tile)
            while True:
                si = dev.read_nv(ctl["layer"])
                if si == n_stages:
                    break
                stage = self.stages[si]
                if stage.kind == "sparse":
                    self._sparse_stage(si, stage)
                else:
                    self._accel_stage(si, stage, tile)
                self._stage_complete(si, stage.kind == "sparse")
            dev.write_nv(ctl["done"], 1)

        def probe():
            peek = dev.mem.peek_nv
            return (
                peek(ctl["layer"]), peek(ctl["pos"]), peek(ctl["idx"]),
                peek(ctl["rd_idx"]), peek(ctl["wr_idx"]), peek(ctl["done"]),
                peek(ctl["cal_tile"]), peek(ctl["cal_valid"]), peek(ctl["cal_attempt"]),
            )

        run_intermittent(dev, self.stats, program, probe, self.stall_limit)
        self._collect_scores()
        return self.stats

    @property
    def calibration(self) -> CalibrationResult:
        peek = self.dev.mem.peek_nv
        return CalibrationResult(
            tile=peek(self.cal_ctx.tile_addr),
            valid=bool(peek(self.cal_ctx.valid_addr)),
            attempts=tuple(self._cal_attempts),
        )

    def _tails_ideal_steps(self, cal_tile: int) -> int:
        total = 0
        for stage, (_, _, _, passes) in zip(self.stages, self.plan):
            if stage.kind == "sparse":
                lay = self.net.layers[stage.layer_idx]
                total += lay.weight.m + lay.weight.nnz
                if stage.shift != 0 or stage.relu:
                    total += lay.weight.m
                continue
            if stage.epilogue:
                total += stage_out_elems(stage)  # software epilogue pass
            if stage.kind == "conv2d":
                o, oh, ow = stage.out_shape
                kw = self.net.layers[stage.layer_idx].weight.shape[3]
                t = self._effective_tile(kw, cal_tile)
                tiles_per_row = -(-ow // t)
                total += (passes - 1) * o * oh * tiles_per_row
            elif stage.kind == "conv1d":
                if stage.axis == 2:
                    a, b, w = stage.out_shape
                    t = self._effective_tile(stage.taps, cal_tile)
                    total += a * b * -(-w // t)
                else:
                    total += stage_out_elems(stage)
            else:  # dense: one step per output row
                total += stage.out_shape[0]
        return total

    # -- accelerated stage dispatch -------------------------------------

    def _accel_stage(self, si: int, stage, cal_tile: int) -> None:
        dev = self.dev
        ctl = self.image.ctl
        src_slot, free, _, passes = self.plan[si]
        src_base = self.image.arena[src_slot]
        lay = self.net.layers[stage.layer_idx]

        while True:
            pos = dev.read_nv(ctl["pos"])
            if pos == passes:
                return
            role = dev.read_nv(ctl["role"])
            i = dev.read_nv(ctl["idx"])
            dest_base = self.image.arena[free[role]]
            inter_base = self.image.arena[free[1 - role]]
            is_epilogue = stage.epilogue and pos == passes - 1

            if is_epilogue:
                self._epilogue_pass(stage, i, stage_out_elems(stage),
                                    inter_base, dest_base)
            elif stage.kind == "conv2d":
                self._conv2d_row_pass(stage, lay, pos, i, cal_tile,
                                      src_base, inter_base, dest_base)
            elif stage.kind == "conv1d":
                if stage.axis == 2:
                    self._fir_axis2_pass(stage, i, cal_tile, src_base, dest_base)
                else:
                    self._dot_axis_pass(stage, i, src_base, dest_base)
            else:
                self._dense_vmac_pass(stage, i, cal_tile, src_base, dest_base)

            if pos == passes - 1:
                return
            dev.transition()
            _prologue(dev)
            self._swap_commit(role, pos)

    def _conv2d_row_pass(self, stage, lay, pos, i, cal_tile,
                         src_base, inter_base, dest_base):
        dev = self.dev
        ctl_idx = self.image.ctl["idx"]
        acfg = self.acfg
        o_n, c_n, kh, kw = lay.weight.shape
        c, fr = pos // kh, pos % kh
        _, oh, ow = stage.out_shape
        _, in_h, in_w = stage.in_shape
        wbase = self._weight_base(stage)
        plane = oh * ow
        t = self._effective_tile(kw, cal_tile)
        f_off, s_off, a_off, o_off = self._opbuf_layout(kw, t)
        n_inner = stage_out_elems(stage)
        accumulate = pos > 0
        cur_o = -1
        e = i
        while e < n_inner:
            self.stats.steps += 1
            o = e // plane
            rem = e - o * plane
            y, x = rem // ow, rem % ow
            tile_len = min(t, ow - x)
            if o != cur_o:  # filter row is reused across the channel plane
                dma(dev, "nonvolatile", wbase + ((o * c_n + c) * kh + fr) * kw,
                    "volatile", f_off, kw)
                cur_o = o
            sig_addr = src_base + (c * in_h + (y + fr)) * in_w + x
            dma(dev, "nonvolatile", sig_addr, "volatile", s_off, tile_len + kw - 1)
            if accumulate:
                dma(dev, "nonvolatile", inter_base + e, "volatile", a_off, tile_len)
            fir_conv_tile(dev, acfg, s_off, tile_len + kw - 1, f_off, kw, o_off,
                          a_off if accumulate else None)
            dma(dev, "volatile", o_off, "nonvolatile", dest_base + e, tile_len)
            e += tile_len
            dev.write_nv(ctl_idx, e)
            dev.ctrl()

    def _fir_axis2_pass(self, stage, i, cal_tile, src_base, dest_base):
        dev = self.dev
        ctl_idx = self.image.ctl["idx"]
        acfg = self.acfg
        taps = stage.taps
        wbase = self._weight_base(stage)
        a_n, b_n, w_out = stage.out_shape
        in_w = stage.in_shape[2]
        t = self._effective_tile(taps, cal_tile)
        f_off, s_off, _, o_off = self._opbuf_layout(taps, t)
        dma(dev, "nonvolatile", wbase, "volatile", f_off, taps)
        n_inner = stage_out_elems(stage)
        e = i
        while e < n_inner:
            self.stats.steps += 1
            ab = e // w_out
            x = e - ab * w_out
            a, b = ab // b_n, ab % b_n
            tile_len = min(t, w_out - x)
            sig_addr = src_base + (a * stage.in_shape[1] + b) * in_w + x
            dma(dev, "nonvolatile", sig_addr, "volatile", s_off, tile_len + taps - 1)
            fir_conv_tile(dev, acfg, s_off, tile_len + taps - 1, f_off, taps, o_off)
            dma(dev, "volatile", o_off, "nonvolatile", dest_base + e, tile_len)
            e += tile_len
            dev.write_nv(ctl_idx, e)
            dev.ctrl()

    def _dot_axis_pass(self, stage, i, src_base, dest_base):
        # strided windows cannot be DMA-ed as a block; software gathers the
        # window, then one dot-product invocation per output element
        dev = self.dev
        ctl_idx = self.image.ctl["idx"]
        acfg = self.acfg
        taps = stage.taps
        wbase = self._weight_base(stage)
        out_shape = stage.out_shape
        in_shape = stage.in_shape
        axis = stage.axis
        stride = 1
        for d in in_shape[axis + 1:]:
            stride *= d
        f_off = 0
        g_off = taps
        dma(dev, "nonvolatile", wbase, "volatile", f_off, taps)
        n_inner = stage_out_elems(stage)
        for e in range(i, n_inner):
            self.stats.steps += 1
            coords = list(_coords(e, out_shape))
            base = _flat_idx(coords, in_shape)
            for tp in range(taps):  # software gather of the strided window
                v = dev.read_nv(src_base + base + tp * stride)
                dev.write_v(g_off + tp, v)
            r = dot_product_tile(dev, acfg, g_off, f_off, taps)
            dev.write_nv(dest_base + e, r)
            dev.write_nv(ctl_idx, e + 1)
            dev.ctrl()

    def _dense_vmac_pass(self, stage, i, cal_tile, src_base, dest_base):
        dev = self.dev
        ctl_idx = self.image.ctl["idx"]
        acfg = self.acfg
        n = stage.taps
        m = stage.out_shape[0]
        wbase = self._weight_base(stage)
        t = max(1, min(cal_tile, (self.acfg.operating_buffer_words - 1) // 2))
        w_off, x_off = 0, t
        for r in range(i, m):
            self.stats.steps += 1
            acc = None
            c0 = 0
            while c0 < n:
                chunk = min(t, n - c0)
                dma(dev, "nonvolatile", wbase + r * n + c0, "volatile", w_off, chunk)
                dma(dev, "nonvolatile", src_base + c0, "volatile", x_off, chunk)
                acc = vector_mac_tile(dev, acfg, w_off, x_off, chunk, acc)
                c0 += chunk
            dev.write_nv(dest_base + r, acc if acc is not None else 0)
            dev.write_nv(ctl_idx, r + 1)
            dev.ctrl()


def tails_infer(net: NetworkModel, inp, device: Device, **kw) -> RunStats:
    runner = TailsRunner(net, device, **kw)
    runner.load_input(inp)
    return runner.run()
