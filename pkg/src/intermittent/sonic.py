"""Loop-continuation execution of DNN layers.

Loop control state (the pass index ``pos`` and the inner index ``idx``)
lives directly in non-volatile memory, is updated at the end of each
iteration, and is deliberately never reset or backed up on task re-entry,
so after a power failure execution resumes at the interrupted iteration; a
failure can repeat at most one iteration and never skips one. This is safe
because every iteration is idempotent:

- Convolution and dense stages use loop-ordered buffering. The loops are
  ordered filter-element-outer: one pass applies a single filter element to
  every input element, accumulating partials from the ``inter`` buffer into
  the distinct ``dest`` buffer (the very first pass writes the product
  alone), so no location is read and then written within an iteration.
  Advancing to the next filter element swaps the buffer roles; the swap,
  inner-index reset, and position increment commit atomically as exactly
  three words through the runtime module's two-phase commit.

- Sparse FC stages use sparse undo-logging: per nonzero, the original
  output activation is copied to a one-word canonical backup, the read
  index advances, the updated activation is written in place, and the write
  index advances. If power fails mid-update, the resumed run recomputes the
  output from the backup. Space overhead is three words regardless of layer
  size, and work grows with the number of modifications, not the buffer
  size.
"""

from __future__ import annotations

from .device import Device
from .fixedpoint import qadd, qmul, qshift, relu16
from .image import stage_out_elems
from .model import NetworkModel, _flat
from .runtime import RedoLog, RunStats, _RunnerBase, _coords, _flat_idx, _prologue, run_intermittent


def three_slot_plan(stages):
    """Per-stage (src_slot, free_pair, out_slot, n_passes).

    Each stage reads its input from ``src``, double-buffers partials in the
    two remaining regions, and leaves its output where the final pass wrote
    it; the next stage rotates roles around that.
    """
    plan = []
    src = 0
    for stage in stages:
        free = tuple(sorted({0, 1, 2} - {src}))
        if stage.kind == "sparse":
            out = free[0]
            passes = 0
        else:
            passes = stage.taps + (1 if stage.epilogue else 0)
            out = free[(passes - 1) % 2]
        plan.append((src, free, out, passes))
        src = out
    return plan


class SonicRunner(_RunnerBase):
    """Inference through loop continuation.

    ``unsafe_swap`` replaces the atomic three-word buffer swap with three
    plain stores; it exists only as a fault-injection handle so divergence
    detectors can prove they would catch a broken runtime.
    """

    runtime_name = "sonic"

    def __init__(self, net, device, *, unsafe_swap: bool = False, **kw):
        super().__init__(net, device, **kw)
        self.plan = three_slot_plan(self.stages)
        self.unsafe_swap = unsafe_swap
        self.log = RedoLog(device, self.image.log_base, self.image.log_capacity, self.stats)
        self.stats.ideal_steps = self._ideal_steps()

    def _ideal_steps(self) -> int:
        total = 0
        for stage, (_, _, _, passes) in zip(self.stages, self.plan):
            if stage.kind == "sparse":
                lay = self.net.layers[stage.layer_idx]
                m = lay.weight.m
                total += m + lay.weight.nnz  # init + accumulate
                if stage.shift != 0 or stage.relu:
                    total += m
            else:
                total += passes * stage_out_elems(stage)
        return total

    # -- control-word helpers -------------------------------------------

    def _swap_commit(self, role: int, pos: int) -> None:
        ctl = self.image.ctl
        if self.unsafe_swap:
            # fault-injection mode: no atomicity between the three words
            self.dev.write_nv(ctl["role"], 1 - role)
            self.dev.write_nv(ctl["idx"], 0)
            self.dev.write_nv(ctl["pos"], pos + 1)
            return
        log = self.log
        log.write(ctl["role"], 1 - role, control=True)
        log.write(ctl["idx"], 0, control=True)
        log.write(ctl["pos"], pos + 1, control=True)
        log.commit()

    def _advance_commit(self, words: dict) -> None:
        log = self.log
        for addr, value in words.items():
            log.write(addr, value, control=True)
        log.commit()

    def _stage_complete(self, si: int, sparse: bool) -> None:
        ctl = self.image.ctl
        words = {ctl["layer"]: si + 1, ctl["pos"]: 0, ctl["idx"]: 0, ctl["role"]: 0}
        if sparse:
            words[ctl["rd_idx"]] = 0
            words[ctl["wr_idx"]] = 0
        self._advance_commit(words)
        self.dev.transition()

    # -- main loop --------------------------------------------------------

    def run(self) -> RunStats:
        image = self.image
        ctl = image.ctl
        n_stages = len(self.stages)
        dev = self.dev

        def program():
            self.log.recover()
            while True:
                si = dev.read_nv(ctl["layer"])
                if si == n_stages:
                    break
                stage = self.stages[si]
                if stage.kind == "sparse":
                    self._sparse_stage(si, stage)
                else:
                    self._loop_ordered_stage(si, stage)
                self._stage_complete(si, stage.kind == "sparse")
            dev.write_nv(ctl["done"], 1)

        def probe():
            peek = dev.mem.peek_nv
            return (
                peek(ctl["layer"]), peek(ctl["pos"]), peek(ctl["idx"]),
                peek(ctl["rd_idx"]), peek(ctl["wr_idx"]), peek(ctl["done"]),
            )

        run_intermittent(dev, self.stats, program, probe, self.stall_limit)
        self._collect_scores()
        return self.stats

    def _collect_scores(self) -> None:
        slot = self.plan[-1][2] if self.plan else 0
        scores = self.image.read_vector(self.dev, slot, self.net.class_count)
        self.stats.scores = tuple(scores)
        self.stats.predicted_class = max(
            range(len(scores)), key=lambda i: (scores[i], -i)
        )

    # -- loop-ordered buffering (conv2d / conv1d / dense) -----------------

    def _loop_ordered_stage(self, si: int, stage) -> None:
        dev = self.dev
        image = self.image
        ctl = image.ctl
        src_slot, free, _, passes = self.plan[si]
        src_base = image.arena[src_slot]
        n_inner = stage_out_elems(stage)
        lay = self.net.layers[stage.layer_idx]

        while True:
            pos = dev.read_nv(ctl["pos"])  # task re-entry: i is NOT reset here
            if pos == passes:
                return
            role = dev.read_nv(ctl["role"])
            i = dev.read_nv(ctl["idx"])
            _prologue(dev)
            dest_base = image.arena[free[role]]
            inter_base = image.arena[free[1 - role]]
            is_epilogue = stage.epilogue and pos == passes - 1

            if is_epilogue:
                self._epilogue_pass(stage, i, n_inner, inter_base, dest_base)
            elif stage.kind == "dense":
                self._dense_pass(stage, pos, i, n_inner, src_base, inter_base, dest_base)
            elif stage.kind == "conv1d":
                self._conv1d_pass(stage, pos, i, n_inner, src_base, inter_base, dest_base)
            else:
                self._conv2d_pass(stage, lay, pos, i, n_inner, src_base, inter_base, dest_base)

            if pos == passes - 1:
                return  # stage-completion commit is the caller's
            # transition into the swap task; its return to the loop task is
            # a direct jump
            dev.transition()
            _prologue(dev)
            self._swap_commit(role, pos)

    def _dense_pass(self, stage, pos, i, n_inner, src_base, inter_base, dest_base):
        dev = self.dev
        stats = self.stats
        ctl_idx = self.image.ctl["idx"]
        rec = dev.recorder
        wbase = self._weight_base(stage)
        n = stage.taps
        x = dev.read_nv(src_base + pos)  # hoisted: one filter element per pass
        for r in range(i, n_inner):
            stats.steps += 1
            if rec:
                rec.mark("iter", (id(stage), pos, r))
            w = dev.read_nv(wbase + r * n + pos)
            dev.mul()
            f = qmul(w, x)
            if pos > 0:
                inter = dev.read_nv(inter_base + r)
                dev.alu()
                f = qadd(inter, f)
            dev.write_nv(dest_base + r, f)
            dev.write_nv(ctl_idx, r + 1)
            dev.ctrl()

    def _conv1d_pass(self, stage, pos, i, n_inner, src_base, inter_base, dest_base):
        dev = self.dev
        stats = self.stats
        ctl_idx = self.image.ctl["idx"]
        rec = dev.recorder
        wbase = self._weight_base(stage)
        w = dev.read_nv(wbase + pos)  # the single filter tap of this pass
        axis = stage.axis
        in_shape = stage.in_shape
        out_shape = stage.out_shape
        for e in range(i, n_inner):
            stats.steps += 1
            if rec:
                rec.mark("iter", (id(stage), pos, e))
            coords = list(_coords(e, out_shape))
            coords[axis] += pos
            s = dev.read_nv(src_base + _flat_idx(coords, in_shape))
            dev.mul()
            f = qmul(w, s)
            if pos > 0:
                inter = dev.read_nv(inter_base + e)
                dev.alu()
                f = qadd(inter, f)
            dev.write_nv(dest_base + e, f)
            dev.write_nv(ctl_idx, e + 1)
            dev.ctrl()

    def _conv2d_pass(self, stage, lay, pos, i, n_inner, src_base, inter_base, dest_base):
        dev = self.dev
        stats = self.stats
        ctl_idx = self.image.ctl["idx"]
        rec = dev.recorder
        wbase = self._weight_base(stage)
        o_n, c_n, kh, kw = lay.weight.shape
        fc = pos % kw
        fr = (pos // kw) % kh
        c = pos // (kh * kw)
        _, oh, ow = stage.out_shape
        plane = oh * ow
        _, in_h, in_w = stage.in_shape
        cur_o = -1
        w = 0
        for e in range(i, n_inner):
            stats.steps += 1
            if rec:
                rec.mark("iter", (id(stage), pos, e))
            o = e // plane
            if o != cur_o:  # filter element is per output channel; hoist it
                w = dev.read_nv(wbase + ((o * c_n + c) * kh + fr) * kw + fc)
                cur_o = o
            rem = e - o * plane
            y, x = rem // ow, rem % ow
            s = dev.read_nv(src_base + (c * in_h + (y + fr)) * in_w + (x + fc))
            dev.mul()
            f = qmul(w, s)
            if pos > 0:
                inter = dev.read_nv(inter_base + e)
                dev.alu()
                f = qadd(inter, f)
            dev.write_nv(dest_base + e, f)
            dev.write_nv(ctl_idx, e + 1)
            dev.ctrl()

    def _epilogue_pass(self, stage, i, n_inner, inter_base, dest_base):
        dev = self.dev
        stats = self.stats
        ctl_idx = self.image.ctl["idx"]
        rec = dev.recorder
        has_bias = stage.bias_name is not None
        bias_base = self._bias_addr(stage, 0) if has_bias else 0
        per_channel = stage.kind in ("conv2d", "conv1d")
        plane = _flat(stage.out_shape[1:]) if per_channel else 1
        for e in range(i, n_inner):
            stats.steps += 1
            if rec:
                rec.mark("iter", (id(stage), "epi", e))
            v = dev.read_nv(inter_base + e)
            if has_bias:
                b = dev.read_nv(bias_base + (e // plane if per_channel else e))
                dev.alu()
                v = qadd(v, b)
            dev.alu()
            v = qshift(v, stage.shift)
            if stage.relu:
                v = relu16(v)
            dev.write_nv(dest_base + e, v)
            dev.write_nv(ctl_idx, e + 1)
            dev.ctrl()

    # -- sparse undo-logging ----------------------------------------------

    def _sparse_stage(self, si: int, stage) -> None:
        dev = self.dev
        image = self.image
        ctl = image.ctl
        src_base = image.arena[self.plan[si][0]]
        out_base = image.arena[self.plan[si][2]]
        lay = self.net.layers[stage.layer_idx]
        m = lay.weight.m
        nnz = lay.weight.nnz
        offs = image.weight_addr(stage.layer_idx, "offsets")
        cols = image.weight_addr(stage.layer_idx, "cols")
        vals = image.weight_addr(stage.layer_idx, "vals")
        stats = self.stats
        rec = dev.recorder
        needs_epilogue = stage.shift != 0 or stage.relu

        while True:
            phase = dev.read_nv(ctl["pos"])
            _prologue(dev)
            if phase == 0:
                # init pass: bias (or zero) into the output buffer; writes of
                # constants are idempotent, so a plain cursor suffices
                i = dev.read_nv(ctl["idx"])
                for r in range(i, m):
                    stats.steps += 1
                    if rec:
                        rec.mark("iter", (id(stage), "init", r))
                    if stage.bias_name is not None:
                        v = dev.read_nv(self._bias_addr(stage, r))
                    else:
                        v = 0
                    dev.write_nv(out_base + r, v)
                    dev.write_nv(ctl["idx"], r + 1)
                    dev.ctrl()
                self._advance_commit({ctl["pos"]: 1, ctl["rd_idx"]: 0, ctl["wr_idx"]: 0})
                dev.transition()
            elif phase == 1:
                self._sparse_accumulate(stage, m, nnz, offs, cols, vals, src_base, out_base)
                nxt = 2 if needs_epilogue else 3
                self._advance_commit({ctl["pos"]: nxt, ctl["rd_idx"]: 0, ctl["wr_idx"]: 0})
                dev.transition()
            elif phase == 2:
                self._sparse_epilogue(stage, m, out_base)
                self._advance_commit({ctl["pos"]: 3, ctl["rd_idx"]: 0, ctl["wr_idx"]: 0})
                dev.transition()
            else:
                return

    def _sparse_accumulate(self, stage, m, nnz, offs, cols, vals, src_base, out_base):
        """Two-phase in-place updates: backup, advance read index, write,
        advance write index. Resuming mid-update recomputes from the backup."""
        dev = self.dev
        ctl = self.image.ctl
        stats = self.stats
        rec = dev.recorder
        wr = dev.read_nv(ctl["wr_idx"])
        rd = dev.read_nv(ctl["rd_idx"])
        if wr >= nnz:
            return
        # the per-nonzero walk below re-locates the CSR row containing `wr`
        r = 0
        row_end = dev.read_nv(offs + 1)
        for j in range(wr, nnz):
            stats.steps += 1
            if rec:
                rec.mark("iter", (id(stage), "acc", j))
            while row_end <= j:
                r += 1
                row_end = dev.read_nv(offs + r + 1)
            col = dev.read_nv(cols + j)
            val = dev.read_nv(vals + j)
            if rd == j:
                orig = dev.read_nv(out_base + r)
                dev.write_nv(ctl["backup"], orig)
                rd = j + 1
                dev.write_nv(ctl["rd_idx"], rd)
                stats.undo_backups += 1
            else:  # rd == j + 1: interrupted mid-update, recompute from backup
                orig = dev.read_nv(ctl["backup"])
            x = dev.read_nv(src_base + col)
            dev.mul()
            dev.alu()
            v = qadd(orig, qmul(val, x))
            dev.write_nv(out_base + r, v)
            stats.undo_writes += 1
            dev.write_nv(ctl["wr_idx"], j + 1)
            dev.ctrl()

    def _sparse_epilogue(self, stage, m, out_base):
        dev = self.dev
        ctl = self.image.ctl
        stats = self.stats
        rec = dev.recorder
        wr = dev.read_nv(ctl["wr_idx"])
        rd = dev.read_nv(ctl["rd_idx"])
        for r in range(wr, m):
            stats.steps += 1
            if rec:
                rec.mark("iter", (id(stage), "epi", r))
            if rd == r:
                orig = dev.read_nv(out_base + r)
                dev.write_nv(ctl["backup"], orig)
                rd = r + 1
                dev.write_nv(ctl["rd_idx"], rd)
                stats.undo_backups += 1
            else:
                orig = dev.read_nv(ctl["backup"])
            dev.alu()
            v = qshift(orig, stage.shift)
            if stage.relu:
                v = relu16(v)
            dev.write_nv(out_base + r, v)
            stats.undo_writes += 1
            dev.write_nv(ctl["wr_idx"], r + 1)
            dev.ctrl()


def sonic_infer(net: NetworkModel, inp, device: Device, **kw) -> RunStats:
    runner = SonicRunner(net, device, **kw)
    runner.load_input(inp)
    return runner.run()


def sparse_control_words() -> int:
    """Non-volatile words of sparse undo-logging state: read index, write
    index, one-slot backup. Constant regardless of layer dimensions."""
    return 3
