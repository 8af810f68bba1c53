"""Task-based intermittent execution.

Tasks execute atomically despite power failures: effects on task-shared
non-volatile state are buffered in a redo log and applied by a two-phase
commit at task transition, so a partially executed task is invisible to its
own re-execution. Long loops are split across tasks by tiling (a fixed
number of iterations per task). A task whose single-execution energy demand
exceeds what the device can buffer never completes; the runner reports
:class:`NonTermination` after a configurable number of consecutive charge
cycles with no progress.

Also provides the two baseline inference executors built on these
primitives: the intermittence-oblivious ``naive`` runner (restarts the
whole inference from scratch at every reboot) and the ``tiled`` runner
(redo-logged task per k iterations).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .device import Device, PowerFailure
from .fixedpoint import qadd, qmul, qshift, relu16
from .image import NetImage, plan_stages, stage_out_elems, two_slot_plan
from .model import NetworkModel


class ConfigError(ValueError):
    pass


class NonTermination(RuntimeError):
    """No forward progress across consecutive charge cycles."""

    def __init__(self, reason: str, *, stalled_cycles: int = 0,
                 demand_uj: float = 0.0, stats: "RunStats | None" = None):
        super().__init__(reason)
        self.reason = reason
        self.stalled_cycles = stalled_cycles
        self.demand_uj = demand_uj  # energy burned by the stalled unit (lower bound)
        self.stats = stats


@dataclass
class RunStats:
    """Shared per-run statistics schema emitted by every runtime."""

    runtime: str = ""
    completed: bool = False
    transitions: int = 0
    commits: int = 0
    commit_entries: int = 0
    recovered_commits: int = 0
    redo_entries: int = 0      # data words logged inside loop iterations
    control_entries: int = 0   # runtime-control words logged (cursors, swaps)
    steps: int = 0             # iteration-body executions, including repeats
    ideal_steps: int = 0       # iteration count of a failure-free run
    undo_backups: int = 0      # sparse undo-logging: backups taken
    undo_writes: int = 0       # sparse undo-logging: in-place value writes
    reboots: int = 0
    charge_cycles: int = 0
    total_energy_uj: float = 0.0
    dead_energy_uj: float = 0.0
    scores: tuple = ()
    predicted_class: int | None = None
    device: dict = field(default_factory=dict)

    @property
    def reexecuted_steps(self) -> int:
        return max(0, self.steps - self.ideal_steps)

    def as_dict(self) -> dict:
        d = {
            "runtime": self.runtime,
            "completed": int(self.completed),
            "transitions": self.transitions,
            "commits": self.commits,
            "commit_entries": self.commit_entries,
            "recovered_commits": self.recovered_commits,
            "redo_entries": self.redo_entries,
            "control_entries": self.control_entries,
            "steps": self.steps,
            "ideal_steps": self.ideal_steps,
            "reexecuted_steps": self.reexecuted_steps,
            "undo_backups": self.undo_backups,
            "undo_writes": self.undo_writes,
            "reboots": self.reboots,
            "charge_cycles": self.charge_cycles,
            "total_energy_uj": self.total_energy_uj,
            "dead_energy_uj": self.dead_energy_uj,
            "predicted_class": self.predicted_class,
        }
        for k, v in self.device.items():
            d[f"dev_{k}"] = v
        return d


def _finalize(stats: RunStats, device: Device) -> None:
    stats.total_energy_uj = device.energy_uj
    stats.dead_energy_uj = device.dead_energy_uj
    stats.reboots = device.reboots
    stats.charge_cycles = device.cycle + 1
    stats.device = device.counters()


def run_intermittent(device: Device, stats: RunStats, program, probe,
                     stall_limit: int = 3):
    """Drive ``program`` to completion across power failures.

    ``probe`` peeks (unmetered) at the progress-bearing state; if it is
    unchanged for ``stall_limit`` consecutive charge cycles the run is
    declared non-terminating.
    """
    stalls = 0
    last = probe()
    max_cycle_energy = 0.0
    while True:
        try:
            result = program()
            device.finish()
            stats.completed = True
            _finalize(stats, device)
            return result
        except PowerFailure:
            cycle_energy = device.cycle_energy_uj
            max_cycle_energy = max(max_cycle_energy, cycle_energy)
            device.reboot()
            snap = probe()
            if snap == last:
                stalls += 1
                if stalls >= stall_limit:
                    _finalize(stats, device)
                    raise NonTermination(
                        f"no progress across {stalls} consecutive charge cycles "
                        f"(energy demand of the stalled unit exceeds the buffer)",
                        stalled_cycles=stalls,
                        demand_uj=max_cycle_energy,
                        stats=stats,
                    ) from None
            else:
                stalls = 0
                last = snap
                max_cycle_energy = cycle_energy


_ADDR_LIMIT = 32767  # logged addresses must fit in one data word


class RedoLog:
    """Redo log in non-volatile memory with a two-phase atomic commit.

    Layout at ``base``: commit flag, entry count, then (address, value)
    word pairs. Until the flag is set, task-shared state is untouched;
    recovery after a failure either replays every logged write (flag set)
    or discards the log (flag clear). Reads within a task see their own
    logged writes.
    """

    def __init__(self, device: Device, base: int, capacity: int, stats: RunStats):
        self.dev = device
        self.stats = stats
        self.flag_addr = base
        self.count_addr = base + 1
        self.entries_addr = base + 2
        self.capacity = capacity
        self.count = 0
        self.mirror: dict[int, tuple[int, int]] = {}  # addr -> (value, entry idx)

    def recover(self) -> None:
        dev = self.dev
        if dev.read_nv(self.flag_addr):
            n = dev.read_nv(self.count_addr)
            for i in range(n):
                a = dev.read_nv(self.entries_addr + 2 * i)
                v = dev.read_nv(self.entries_addr + 2 * i + 1)
                dev.write_nv(a, v)
            dev.write_nv(self.count_addr, 0)
            dev.write_nv(self.flag_addr, 0)
            self.stats.recovered_commits += 1
        elif dev.read_nv(self.count_addr):
            dev.write_nv(self.count_addr, 0)  # discard uncommitted entries
        self.count = 0
        self.mirror = {}

    def write(self, addr: int, value: int, *, control: bool = False) -> None:
        if addr > _ADDR_LIMIT:
            raise ConfigError(f"logged address {addr} does not fit in a word")
        if self.count >= self.capacity:
            raise ConfigError(
                f"redo log overflow: task writes exceed the {self.capacity}-entry bound"
            )
        dev = self.dev
        idx = self.count
        dev.write_nv(self.entries_addr + 2 * idx, addr)
        dev.write_nv(self.entries_addr + 2 * idx + 1, value)
        self.count = idx + 1
        dev.write_nv(self.count_addr, self.count)
        self.mirror[addr] = (((value + 0x8000) & 0xFFFF) - 0x8000, idx)
        if control:
            self.stats.control_entries += 1
        else:
            self.stats.redo_entries += 1

    def read(self, addr: int) -> int:
        hit = self.mirror.get(addr)
        if hit is None:
            return self.dev.read_nv(addr)
        value, idx = hit
        self.dev.read_nv(self.entries_addr + 2 * idx + 1)  # served from the log
        return value

    def commit(self) -> None:
        if self.count == 0:
            return
        dev = self.dev
        dev.write_nv(self.flag_addr, 1)
        for i in range(self.count):
            a = dev.read_nv(self.entries_addr + 2 * i)
            v = dev.read_nv(self.entries_addr + 2 * i + 1)
            dev.write_nv(a, v)
        dev.write_nv(self.count_addr, 0)
        dev.write_nv(self.flag_addr, 0)
        self.stats.commits += 1
        self.stats.commit_entries += self.count
        self.count = 0
        self.mirror = {}


@dataclass
class Task:
    name: str
    body: object  # callable(ctx) -> successor task name | None


class TaskCtx:
    """What a task body sees: metered device plus redo-logged shared state."""

    __slots__ = ("dev", "log", "stats")

    def __init__(self, dev: Device, log: RedoLog, stats: RunStats):
        self.dev = dev
        self.log = log
        self.stats = stats

    def read(self, addr: int) -> int:
        return self.log.read(addr)

    def write(self, addr: int, value: int, *, control: bool = False) -> None:
        self.log.write(addr, value, control=control)


def _prologue(dev: Device) -> None:
    # task-local volatile stack re-initialization, metered
    dev.ctrl()
    dev.write_v(0, 0)
    dev.write_v(1, 0)


def run_task_graph(tasks: list[Task], device: Device, *,
                   start: str | None = None,
                   ctl_addr: int = 0, log_base: int = 1, log_capacity: int = 64,
                   progress_words: tuple = (), stats: RunStats | None = None,
                   stall_limit: int = 3) -> RunStats:
    """Run a task graph to completion under the device's power schedule.

    The current-task pointer lives at ``ctl_addr`` in non-volatile memory
    and is updated through the same committed log as the task's writes, so
    a transition is atomic with the task's effects.
    """
    stats = stats or RunStats(runtime="task_graph")
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate task names")
    index = {t.name: i for i, t in enumerate(tasks)}
    done_idx = len(tasks)
    log = RedoLog(device, log_base, log_capacity, stats)
    ctx = TaskCtx(device, log, stats)
    device.mem.poke_nv(ctl_addr, index[start] if start else 0)

    def program():
        log.recover()
        while True:
            cur = device.read_nv(ctl_addr)
            if cur == done_idx:
                return
            task = tasks[cur]
            _prologue(device)
            nxt = task.body(ctx)
            nxt_idx = done_idx if nxt is None else index[nxt]
            log.write(ctl_addr, nxt_idx, control=True)
            log.commit()
            stats.transitions += 1
            device.transition()

    def probe():
        words = tuple(device.mem.peek_nv(a) for a in progress_words)
        return (device.mem.peek_nv(ctl_addr), stats.commits, words)

    run_intermittent(device, stats, program, probe, stall_limit)
    return stats


@dataclass
class TiledLoop:
    """A loop split into tasks of ``tile`` iterations with a committed
    non-volatile progress cursor."""

    total: int
    tile: int
    body: object  # callable(ctx, i) for one iteration
    cursor_addr: int


def run_tiled_loop(loop: TiledLoop, device: Device, *, stats: RunStats | None = None,
                   **kw) -> RunStats:
    if loop.tile < 1:
        raise ConfigError("tile size must be >= 1")
    stats = stats or RunStats(runtime=f"tiled:{loop.tile}")
    stats.ideal_steps = loop.total

    def task_body(ctx: TaskCtx):
        cur = ctx.read(loop.cursor_addr)
        end = min(cur + loop.tile, loop.total)
        for i in range(cur, end):
            stats.steps += 1
            loop.body(ctx, i)
        ctx.write(loop.cursor_addr, end, control=True)
        return "loop" if end < loop.total else None

    return run_task_graph(
        [Task("loop", task_body)], device, start="loop",
        progress_words=(loop.cursor_addr,), stats=stats, **kw,
    )


# -- inference executors ---------------------------------------------------


def _coords(flat: int, shape) -> tuple:
    out = []
    for d in reversed(shape):
        out.append(flat % d)
        flat //= d
    return tuple(reversed(out))


def _flat_idx(coords, shape) -> int:
    idx = 0
    for c, d in zip(coords, shape):
        idx = idx * d + c
    return idx


class _RunnerBase:
    runtime_name = "?"

    def __init__(self, net: NetworkModel, device: Device, *, log_capacity: int = 64,
                 stall_limit: int = 3):
        self.net = net
        self.dev = device
        self.image = NetImage(net, log_capacity=log_capacity)
        self.image.flash(device.mem)
        self.stages = plan_stages(net)
        self.slots = two_slot_plan(self.stages)
        self.stats = RunStats(runtime=self.runtime_name)
        self.stall_limit = stall_limit

    def load_input(self, tensor) -> None:
        self.image.load_input(self.dev, tensor, slot=0)

    def _collect_scores(self) -> None:
        slot = self.slots[-1][1] if self.slots else 0
        scores = self.image.read_vector(self.dev, slot, self.net.class_count)
        self.stats.scores = tuple(scores)
        best = max(range(len(scores)), key=lambda i: (scores[i], -i))
        self.stats.predicted_class = best

    # addressing helpers shared by the executors
    def _conv_tap(self, stage, t):
        lay = self.net.layers[stage.layer_idx]
        o_, c_, kh, kw = lay.weight.shape
        fc = t % kw
        fr = (t // kw) % kh
        c = t // (kh * kw)
        return c, fr, fc

    def _weight_base(self, stage):
        return self.image.weight_addr(stage.layer_idx, stage.weight_name)

    def _bias_addr(self, stage, o):
        return self.image.weight_addr(stage.layer_idx, "bias") + o

    def _mac_addrs(self, stage, lay, e, t, wbase, in_base):
        if stage.kind == "conv2d":
            o_, c_, kh, kw = lay.weight.shape
            o, y, x = _coords(e, stage.out_shape)
            c, fr, fc = self._conv_tap(stage, t)
            waddr = wbase + ((o * c_ + c) * kh + fr) * kw + fc
            saddr = in_base + _flat_idx((c, y + fr, x + fc), stage.in_shape)
        elif stage.kind == "conv1d":
            coords = list(_coords(e, stage.out_shape))
            coords[stage.axis] += t
            waddr = wbase + t
            saddr = in_base + _flat_idx(coords, stage.in_shape)
        else:  # dense
            n = stage.taps
            r = e
            waddr = wbase + r * n + t
            saddr = in_base + t
        return waddr, saddr

    def _epilogue(self, stage, e, acc):
        dev = self.dev
        if not stage.epilogue:
            return acc
        if stage.bias_name is not None:
            o = _coords(e, stage.out_shape)[0] if stage.kind in ("conv2d", "conv1d") else e
            b = dev.read_nv(self._bias_addr(stage, o))
            dev.alu()
            acc = qadd(acc, b)
        dev.alu()
        acc = qshift(acc, stage.shift)
        if stage.relu:
            acc = relu16(acc)
        return acc


class NaiveRunner(_RunnerBase):
    """Standard baseline: no intermittence support at all.

    Accumulates in registers, writes each activation once, keeps no
    progress state; a power failure restarts the entire inference. It
    therefore only terminates when a whole inference fits in one charge
    cycle.
    """

    runtime_name = "naive"

    def __init__(self, net, device, **kw):
        super().__init__(net, device, **kw)
        self.stats.ideal_steps = sum(stage_out_elems(s) for s in self.stages)

    def run(self) -> RunStats:
        image = self.image

        def program():
            for si, stage in enumerate(self.stages):
                in_base = image.arena[self.slots[si][0]]
                out_base = image.arena[self.slots[si][1]]
                if stage.kind == "sparse":
                    self._sparse_stage(stage, in_base, out_base)
                else:
                    self._dense_stage(stage, in_base, out_base)
            self.dev.write_nv(image.ctl["done"], 1)

        def probe():
            return self.dev.mem.peek_nv(image.ctl["done"])

        run_intermittent(self.dev, self.stats, program, probe, self.stall_limit)
        self._collect_scores()
        return self.stats

    def _dense_stage(self, stage, in_base, out_base):
        dev = self.dev
        stats = self.stats
        wbase = self._weight_base(stage)
        lay = self.net.layers[stage.layer_idx]
        n_out = stage_out_elems(stage)
        taps = stage.taps
        for e in range(n_out):
            stats.steps += 1
            acc = 0
            for t in range(taps):
                waddr, saddr = self._mac_addrs(stage, lay, e, t, wbase, in_base)
                w = dev.read_nv(waddr)
                s = dev.read_nv(saddr)
                dev.mul()
                f = qmul(w, s)
                if t == 0:
                    acc = f
                else:
                    dev.alu()
                    acc = qadd(acc, f)
            acc = self._epilogue(stage, e, acc)
            dev.write_nv(out_base + e, acc)
            dev.ctrl()

    def _sparse_stage(self, stage, in_base, out_base):
        dev = self.dev
        stats = self.stats
        li = stage.layer_idx
        offs = self.image.weight_addr(li, "offsets")
        cols = self.image.weight_addr(li, "cols")
        vals = self.image.weight_addr(li, "vals")
        lay = self.net.layers[li]
        m = lay.weight.m
        for r in range(m):
            stats.steps += 1
            lo = dev.read_nv(offs + r)
            hi = dev.read_nv(offs + r + 1)
            if lay.bias is not None:
                acc = dev.read_nv(self._bias_addr(stage, r))
            else:
                acc = 0
            for j in range(lo, hi):
                col = dev.read_nv(cols + j)
                val = dev.read_nv(vals + j)
                x = dev.read_nv(in_base + col)
                dev.mul()
                dev.alu()
                acc = qadd(acc, qmul(val, x))
            dev.alu()
            acc = qshift(acc, stage.shift)
            if stage.relu:
                acc = relu16(acc)
            dev.write_nv(out_base + r, acc)
            dev.ctrl()

class TiledRunner(_RunnerBase):
    """Redo-logged task per ``tile`` loop iterations (the prior-work style
    this package compares against).

    The iteration grain is one multiply-accumulate (one row for sparse
    stages); the output accumulator is task-shared state, so every update
    is logged and committed. Tasks never straddle a stage boundary, which
    keeps transitions per stage at ceil(iterations / tile).
    """

    runtime_name = "tiled"

    def __init__(self, net, device, *, tile: int, **kw):
        kw.setdefault("log_capacity", max(2 * tile + 16, 64))
        super().__init__(net, device, **kw)
        if tile < 1:
            raise ConfigError("tile size must be >= 1")
        self.tile = tile
        self.stats.runtime = f"tiled:{tile}"
        self.iters = [self._stage_iters(s) for s in self.stages]
        self.stats.ideal_steps = sum(self.iters)

    def _stage_iters(self, stage) -> int:
        if stage.kind == "sparse":
            return stage.out_shape[0]
        return stage_out_elems(stage) * stage.taps

    def run(self) -> RunStats:
        image = self.image
        ctl = image.ctl
        stage_w, cursor_w, done_w = ctl["layer"], ctl["cursor"], ctl["done"]
        n_stages = len(self.stages)

        def task_body(ctx: TaskCtx):
            si = ctx.read(stage_w)
            if si == n_stages:
                ctx.write(done_w, 1, control=True)
                return None
            cur = ctx.read(cursor_w)
            stage = self.stages[si]
            total = self.iters[si]
            end = min(cur + self.tile, total)
            in_base = image.arena[self.slots[si][0]]
            out_base = image.arena[self.slots[si][1]]
            for j in range(cur, end):
                self.stats.steps += 1
                if stage.kind == "sparse":
                    self._sparse_iter(ctx, stage, j, in_base, out_base)
                else:
                    self._mac_iter(ctx, stage, j, in_base, out_base)
            if end == total:
                ctx.write(stage_w, si + 1, control=True)
                ctx.write(cursor_w, 0, control=True)
            else:
                ctx.write(cursor_w, end, control=True)
            return "tile"

        stats = run_task_graph(
            [Task("tile", task_body)], self.dev, start="tile",
            ctl_addr=image.ctl["cur_task"], log_base=image.log_base,
            log_capacity=image.log_capacity,
            progress_words=(stage_w, cursor_w), stats=self.stats,
            stall_limit=self.stall_limit,
        )
        self._collect_scores()
        return stats

    def _mac_iter(self, ctx: TaskCtx, stage, j, in_base, out_base):
        dev = self.dev
        lay = self.net.layers[stage.layer_idx]
        taps = stage.taps
        e, t = j // taps, j % taps
        waddr, saddr = self._mac_addrs(stage, lay, e, t, self._weight_base(stage), in_base)
        w = dev.read_nv(waddr)
        s = dev.read_nv(saddr)
        dev.mul()
        f = qmul(w, s)
        out_addr = out_base + e
        if t == 0:
            acc = f
        else:
            acc = ctx.read(out_addr)
            dev.alu()
            acc = qadd(acc, f)
        if t == taps - 1:
            acc = NaiveRunner._epilogue(self, stage, e, acc)
        ctx.write(out_addr, acc)
        dev.ctrl()

    def _sparse_iter(self, ctx: TaskCtx, stage, r, in_base, out_base):
        dev = self.dev
        li = stage.layer_idx
        image = self.image
        offs = image.weight_addr(li, "offsets")
        cols = image.weight_addr(li, "cols")
        vals = image.weight_addr(li, "vals")
        lay = self.net.layers[li]
        lo = dev.read_nv(offs + r)
        hi = dev.read_nv(offs + r + 1)
        if lay.bias is not None:
            acc = dev.read_nv(self._bias_addr(stage, r))
        else:
            acc = 0
        for j in range(lo, hi):
            col = dev.read_nv(cols + j)
            val = dev.read_nv(vals + j)
            x = dev.read_nv(in_base + col)
            dev.mul()
            dev.alu()
            acc = qadd(acc, qmul(val, x))
        dev.alu()
        acc = qshift(acc, stage.shift)
        if stage.relu:
            acc = relu16(acc)
        ctx.write(out_base + r, acc)
        dev.ctrl()


def naive_infer(net: NetworkModel, inp, device: Device, **kw) -> RunStats:
    runner = NaiveRunner(net, device, **kw)
    runner.load_input(inp)
    return runner.run()


def tiled_infer(net: NetworkModel, inp, device: Device, tile: int, **kw) -> RunStats:
    runner = TiledRunner(net, device, tile=tile, **kw)
    runner.load_input(inp)
    return runner.run()
