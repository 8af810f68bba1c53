"""Simulated energy-harvesting device.

A :class:`Device` bundles an energy buffer, a per-operation cost model, a
power schedule, and a word-addressable memory split into a volatile region
(cleared on reboot) and a non-volatile region (persists). Every metered
operation debits the buffer before taking effect; a debit that cannot be
paid raises :class:`PowerFailure`, which the runtimes catch at their reboot
loop. Failures only ever happen at operation boundaries, never mid-word.

Energies are microjoules throughout. The default cost table is a
calibration knob, not a measurement: it is chosen so that the qualitative
orderings hold (non-volatile writes are the most expensive memory access,
task transitions are very expensive, accelerator element work is cheap) and
it can be overridden from a JSON config file.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, fields
from enum import Enum
from pathlib import Path

WORD_BITS = 16
WORD_BYTES = 2
_WORD_MASK = 0xFFFF


class PowerFailure(Exception):
    """Raised when an operation cannot be paid; unwinds to the reboot loop."""


class AddressError(IndexError):
    pass


class ContractViolation(ValueError):
    pass


class Outcome(Enum):
    ALIVE = "alive"
    POWER_FAILED = "power_failed"


@dataclass
class CostModel:
    """Energy per operation class, in microjoules. All costs are positive.

    The non-volatile write cost is kept at or above the non-volatile read
    cost; the multiply cost reflects that integer multiplication on the
    target MCU class is a multi-cycle peripheral operation.
    """

    volatile_read: float = 1.0
    volatile_write: float = 1.0
    nonvolatile_read: float = 2.0
    nonvolatile_write: float = 4.0
    arithmetic: float = 1.0
    multiply: float = 9.0
    control: float = 1.0
    task_transition: float = 40.0
    dma_word: float = 1.0
    dma_setup: float = 2.0
    accel_op: float = 0.25

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and v > 0):
                raise ContractViolation(f"cost {f.name} must be strictly positive")
        if self.nonvolatile_write < self.nonvolatile_read:
            raise ContractViolation(
                "nonvolatile_write must be >= nonvolatile_read"
            )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "CostModel":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown cost fields: {sorted(unknown)}")
        return cls(**d)


# Capacitor preset names mapped to buffer capacities in microjoules. The
# names follow common hardware sizes but the values are non-physical
# calibration knobs (the mapping depends on operating voltage, which the
# cost model does not track). Override via config.
BUFFER_PRESETS: dict[str, float] = {
    "100uF": 2_000.0,
    "1mF": 20_000.0,
    "50mF": 1_000_000.0,
}


@dataclass
class EnergyBuffer:
    """Capacitor-like store of microjoules; recharge always fills it."""

    capacity_uj: float
    level_uj: float | None = None
    preset_name: str | None = None

    def __post_init__(self):
        if self.capacity_uj < 0:
            raise ContractViolation("capacity must be non-negative")
        if self.level_uj is None:
            self.level_uj = self.capacity_uj
        if not (0 <= self.level_uj <= self.capacity_uj):
            raise ContractViolation("0 <= level <= capacity violated")

    @classmethod
    def from_preset(cls, name: str) -> "EnergyBuffer":
        try:
            cap = BUFFER_PRESETS[name]
        except KeyError:
            raise ContractViolation(
                f"unknown buffer preset {name!r}; known: {sorted(BUFFER_PRESETS)}"
            ) from None
        return cls(capacity_uj=cap, preset_name=name)

    def consume(self, cost_uj: float) -> Outcome:
        if cost_uj < 0:
            raise ContractViolation("cost must be non-negative")
        if self.level_uj >= cost_uj:
            self.level_uj -= cost_uj
            return Outcome.ALIVE
        return Outcome.POWER_FAILED

    def recharge(self, budget_uj: float | None = None) -> None:
        if budget_uj is None:
            self.level_uj = self.capacity_uj
        else:
            self.level_uj = min(budget_uj, self.capacity_uj)


class ScheduleMode(str, Enum):
    CONTINUOUS = "continuous"
    FIXED_BUDGET = "fixed_budget"
    TRACE = "trace"
    SEEDED_RANDOM = "seeded_random"
    OP_TRACE = "op_trace"


@dataclass(frozen=True)
class PowerSchedule:
    """Immutable description of when power fails.

    - continuous: never fails.
    - fixed_budget: every on-period provides the same energy.
    - trace: explicit failure points by cumulative energy consumed.
    - seeded_random: per-period energy drawn uniformly from [low, high]
      with a private seeded generator; replays are bit-deterministic.
    - op_trace: forced failures after given metered-operation ordinals,
      with unlimited energy otherwise. This is the replay harness used for
      exhaustive boundary failure injection.
    """

    mode: ScheduleMode = ScheduleMode.CONTINUOUS
    budget_uj: float = 0.0
    points: tuple[float, ...] = ()
    seed: int = 0
    low_uj: float = 0.0
    high_uj: float = 0.0
    fail_after_ops: tuple[int, ...] = ()

    @staticmethod
    def continuous() -> "PowerSchedule":
        return PowerSchedule(ScheduleMode.CONTINUOUS)

    @staticmethod
    def fixed_budget(budget_uj: float) -> "PowerSchedule":
        if budget_uj <= 0:
            raise ContractViolation("budget must be positive")
        return PowerSchedule(ScheduleMode.FIXED_BUDGET, budget_uj=budget_uj)

    @staticmethod
    def trace(points) -> "PowerSchedule":
        pts = tuple(float(p) for p in points)
        if any(b <= a for a, b in zip(pts, pts[1:])) or (pts and pts[0] <= 0):
            raise ContractViolation("trace points must be positive and increasing")
        return PowerSchedule(ScheduleMode.TRACE, points=pts)

    @staticmethod
    def seeded_random(seed: int, low_uj: float, high_uj: float) -> "PowerSchedule":
        if not (0 < low_uj <= high_uj):
            raise ContractViolation("need 0 < low <= high")
        return PowerSchedule(
            ScheduleMode.SEEDED_RANDOM, seed=seed, low_uj=low_uj, high_uj=high_uj
        )

    @staticmethod
    def op_trace(fail_after_ops) -> "PowerSchedule":
        ops = tuple(int(k) for k in fail_after_ops)
        if any(b <= a for a, b in zip(ops, ops[1:])) or (ops and ops[0] < 1):
            raise ContractViolation("op indices must be >= 1 and increasing")
        return PowerSchedule(ScheduleMode.OP_TRACE, fail_after_ops=ops)

    def budget_stream(self):
        """Yield the usable energy for cycle 0, 1, 2, ... (inf = unlimited)."""
        if self.mode in (ScheduleMode.CONTINUOUS, ScheduleMode.OP_TRACE):
            while True:
                yield math.inf
        elif self.mode is ScheduleMode.FIXED_BUDGET:
            while True:
                yield self.budget_uj
        elif self.mode is ScheduleMode.TRACE:
            prev = 0.0
            for p in self.points:
                yield p - prev
                prev = p
            while True:  # after the last failure point, power holds
                yield math.inf
        else:
            rng = random.Random(self.seed)
            while True:
                yield rng.uniform(self.low_uj, self.high_uj)


class MemorySpace:
    """Paired volatile / non-volatile word arrays with access counters.

    Rebooting zeroes the volatile region (and, by construction of the
    runtimes, all task-local Python state); the non-volatile region is
    bit-identical across reboots.
    """

    def __init__(self, volatile_bytes: int = 4096, nonvolatile_bytes: int = 262144):
        self.volatile_words = volatile_bytes // WORD_BYTES
        self.nonvolatile_words = nonvolatile_bytes // WORD_BYTES
        self.volatile = [0] * self.volatile_words
        self.nonvolatile = [0] * self.nonvolatile_words
        self.reboot_count = 0

    def reboot(self) -> None:
        self.volatile = [0] * self.volatile_words
        self.reboot_count += 1

    # Unmetered accessors for the harness (flashing weights, inspecting
    # results). These model programming-time and measurement-rig access,
    # not device execution.
    def peek_nv(self, addr: int) -> int:
        return self.nonvolatile[addr]

    def poke_nv(self, addr: int, value: int) -> None:
        self.nonvolatile[addr] = _to_word(value)

    def peek_v(self, addr: int) -> int:
        return self.volatile[addr]

    def poke_v(self, addr: int, value: int) -> None:
        self.volatile[addr] = _to_word(value)


def _to_word(value: int) -> int:
    return ((int(value) + 0x8000) & _WORD_MASK) - 0x8000


class AccessRecorder:
    """Optional per-access log used by invariant-checking tests."""

    def __init__(self):
        self.events: list[tuple] = []

    def note(self, kind: str, addr: int) -> None:
        self.events.append((kind, addr))

    def mark(self, tag: str, payload=None) -> None:
        self.events.append(("mark", tag, payload))


class Device:
    """One simulated device: memory + buffer + schedule + cost model.

    Instances are single-threaded and independent; parallel sweeps use one
    Device per run. The metered-access methods are deliberately flat and
    repetitive: they are the simulator's hot path.
    """

    def __init__(
        self,
        *,
        costs: CostModel | None = None,
        buffer: EnergyBuffer | None = None,
        schedule: PowerSchedule | None = None,
        volatile_bytes: int = 4096,
        nonvolatile_bytes: int = 262144,
        recorder: AccessRecorder | None = None,
        keep_trace: bool = False,
    ):
        self.costs = costs or CostModel()
        self.schedule = schedule or PowerSchedule.continuous()
        self.mem = MemorySpace(volatile_bytes, nonvolatile_bytes)
        self.recorder = recorder
        self.keep_trace = keep_trace

        if buffer is None:
            buffer = EnergyBuffer(capacity_uj=math.inf)
        self.capacity_uj = buffer.capacity_uj
        self.preset_name = buffer.preset_name

        self._budgets = self.schedule.budget_stream()
        self.level_uj = self._charge(next(self._budgets))

        self._fail_ops = list(self.schedule.fail_after_ops)
        self._fail_cursor = 0
        self._next_fail = self._fail_ops[0] if self._fail_ops else -1

        # cached costs (attribute lookups add up in the hot path)
        c = self.costs
        self._c_vr = c.volatile_read
        self._c_vw = c.volatile_write
        self._c_nr = c.nonvolatile_read
        self._c_nw = c.nonvolatile_write
        self._c_al = c.arithmetic
        self._c_mu = c.multiply
        self._c_ct = c.control
        self._c_tr = c.task_transition
        self._c_dw = c.dma_word

        self.op_count = 0
        self.energy_uj = 0.0
        self.cycle_energy_uj = 0.0
        self.dead_energy_uj = 0.0
        self.cycle = 0
        self.reboots = 0

        self.vol_reads = 0
        self.vol_writes = 0
        self.nv_reads = 0
        self.nv_writes = 0
        self.alu_ops = 0
        self.mul_ops = 0
        self.ctrl_ops = 0
        self.transitions = 0
        self.dma_words = 0
        self.accel_invocations = 0
        self.accel_elements = 0

        self.trace_rows: list[tuple] = []

    @property
    def buffer(self) -> EnergyBuffer:
        lvl = self.level_uj if math.isfinite(self.level_uj) else self.capacity_uj
        return EnergyBuffer(self.capacity_uj, min(lvl, self.capacity_uj), self.preset_name)

    # -- failure / reboot machinery ------------------------------------

    def _power_fail(self):
        if math.isfinite(self.level_uj):
            self.dead_energy_uj += self.level_uj
        self.level_uj = 0.0
        if self._next_fail == self.op_count:
            self._fail_cursor += 1
            self._next_fail = (
                self._fail_ops[self._fail_cursor]
                if self._fail_cursor < len(self._fail_ops)
                else -1
            )
        if self.keep_trace:
            self.trace_rows.append(self._trace_row(dead=1))
        raise PowerFailure()

    def _charge(self, budget: float) -> float:
        # an unlimited budget means harvesting outpaces consumption: the
        # buffer never empties, whatever its capacity
        return budget if math.isinf(budget) else min(budget, self.capacity_uj)

    def reboot(self) -> None:
        """Clear volatile state and recharge from the schedule."""
        self.mem.reboot()
        self.reboots += 1
        self.cycle += 1
        self.cycle_energy_uj = 0.0
        self.level_uj = self._charge(next(self._budgets))

    def finish(self) -> None:
        """Record the final (live) trace row; call once per completed run."""
        if self.keep_trace:
            self.trace_rows.append(self._trace_row(dead=0))

    # -- metered operations (hot path) ---------------------------------

    def read_nv(self, addr: int) -> int:
        if addr < 0 or addr >= self.mem.nonvolatile_words:
            raise AddressError(f"nonvolatile read out of bounds: {addr}")
        self.op_count += 1
        if self.op_count == self._next_fail:
            self._power_fail()
        lvl = self.level_uj - self._c_nr
        if lvl < 0.0:
            self._power_fail()
        self.level_uj = lvl
        self.energy_uj += self._c_nr
        self.cycle_energy_uj += self._c_nr
        self.nv_reads += 1
        if self.recorder is not None:
            self.recorder.note("nv_read", addr)
        return self.mem.nonvolatile[addr]

    def write_nv(self, addr: int, value: int) -> None:
        if addr < 0 or addr >= self.mem.nonvolatile_words:
            raise AddressError(f"nonvolatile write out of bounds: {addr}")
        self.op_count += 1
        if self.op_count == self._next_fail:
            self._power_fail()
        lvl = self.level_uj - self._c_nw
        if lvl < 0.0:
            self._power_fail()
        self.level_uj = lvl
        self.energy_uj += self._c_nw
        self.cycle_energy_uj += self._c_nw
        self.nv_writes += 1
        if self.recorder is not None:
            self.recorder.note("nv_write", addr)
        self.mem.nonvolatile[addr] = ((value + 0x8000) & 0xFFFF) - 0x8000

    def read_v(self, addr: int) -> int:
        if addr < 0 or addr >= self.mem.volatile_words:
            raise AddressError(f"volatile read out of bounds: {addr}")
        self.op_count += 1
        if self.op_count == self._next_fail:
            self._power_fail()
        lvl = self.level_uj - self._c_vr
        if lvl < 0.0:
            self._power_fail()
        self.level_uj = lvl
        self.energy_uj += self._c_vr
        self.cycle_energy_uj += self._c_vr
        self.vol_reads += 1
        if self.recorder is not None:
            self.recorder.note("v_read", addr)
        return self.mem.volatile[addr]

    def write_v(self, addr: int, value: int) -> None:
        if addr < 0 or addr >= self.mem.volatile_words:
            raise AddressError(f"volatile write out of bounds: {addr}")
        self.op_count += 1
        if self.op_count == self._next_fail:
            self._power_fail()
        lvl = self.level_uj - self._c_vw
        if lvl < 0.0:
            self._power_fail()
        self.level_uj = lvl
        self.energy_uj += self._c_vw
        self.cycle_energy_uj += self._c_vw
        self.vol_writes += 1
        if self.recorder is not None:
            self.recorder.note("v_write", addr)
        self.mem.volatile[addr] = ((value + 0x8000) & 0xFFFF) - 0x8000

    def alu(self) -> None:
        self.op_count += 1
        if self.op_count == self._next_fail:
            self._power_fail()
        lvl = self.level_uj - self._c_al
        if lvl < 0.0:
            self._power_fail()
        self.level_uj = lvl
        self.energy_uj += self._c_al
        self.cycle_energy_uj += self._c_al
        self.alu_ops += 1

    def mul(self) -> None:
        self.op_count += 1
        if self.op_count == self._next_fail:
            self._power_fail()
        lvl = self.level_uj - self._c_mu
        if lvl < 0.0:
            self._power_fail()
        self.level_uj = lvl
        self.energy_uj += self._c_mu
        self.cycle_energy_uj += self._c_mu
        self.mul_ops += 1

    def ctrl(self) -> None:
        self.op_count += 1
        if self.op_count == self._next_fail:
            self._power_fail()
        lvl = self.level_uj - self._c_ct
        if lvl < 0.0:
            self._power_fail()
        self.level_uj = lvl
        self.energy_uj += self._c_ct
        self.cycle_energy_uj += self._c_ct
        self.ctrl_ops += 1

    def transition(self) -> None:
        self.op_count += 1
        if self.op_count == self._next_fail:
            self._power_fail()
        lvl = self.level_uj - self._c_tr
        if lvl < 0.0:
            self._power_fail()
        self.level_uj = lvl
        self.energy_uj += self._c_tr
        self.cycle_energy_uj += self._c_tr
        self.transitions += 1

    def dma_word(self) -> None:
        self.op_count += 1
        if self.op_count == self._next_fail:
            self._power_fail()
        lvl = self.level_uj - self._c_dw
        if lvl < 0.0:
            self._power_fail()
        self.level_uj = lvl
        self.energy_uj += self._c_dw
        self.cycle_energy_uj += self._c_dw
        self.dma_words += 1

    def spend(self, cost_uj: float, kind: str = "misc") -> None:
        """Metered debit for costs without a dedicated counter (e.g. DMA
        setup, accelerator invocation)."""
        if cost_uj < 0:
            raise ContractViolation("cost must be non-negative")
        self.op_count += 1
        if self.op_count == self._next_fail:
            self._power_fail()
        lvl = self.level_uj - cost_uj
        if lvl < 0.0:
            self._power_fail()
        self.level_uj = lvl
        self.energy_uj += cost_uj
        self.cycle_energy_uj += cost_uj

    def accel_block(self, elements: int, invocation_uj: float, per_element_uj: float) -> None:
        """One accelerator invocation processing ``elements`` element-ops.

        The whole invocation is a single failure boundary: the accelerator
        either completes its tile or the run dies at the invocation.
        """
        cost = invocation_uj + elements * per_element_uj
        self.op_count += 1
        if self.op_count == self._next_fail:
            self._power_fail()
        lvl = self.level_uj - cost
        if lvl < 0.0:
            self._power_fail()
        self.level_uj = lvl
        self.energy_uj += cost
        self.cycle_energy_uj += cost
        self.accel_invocations += 1
        self.accel_elements += elements

    # -- generic metered access (the documented module operation) -------

    def metered_access(self, region: str, address: int, kind: str, value: int | None = None):
        """Energy-metered word access; returns the read value or None.

        Raises AddressError for out-of-bounds addresses and PowerFailure
        when the debit cannot be paid (the write then does not occur).
        """
        if region == "nonvolatile":
            if kind == "read":
                return self.read_nv(address)
            if kind == "write":
                if value is None:
                    raise ContractViolation("write needs a value")
                self.write_nv(address, value)
                return None
        elif region == "volatile":
            if kind == "read":
                return self.read_v(address)
            if kind == "write":
                if value is None:
                    raise ContractViolation("write needs a value")
                self.write_v(address, value)
                return None
        raise ContractViolation(f"bad region/kind: {region}/{kind}")

    # -- reporting -------------------------------------------------------

    def counters(self) -> dict:
        return {
            "vol_reads": self.vol_reads,
            "vol_writes": self.vol_writes,
            "nv_reads": self.nv_reads,
            "nv_writes": self.nv_writes,
            "alu_ops": self.alu_ops,
            "mul_ops": self.mul_ops,
            "ctrl_ops": self.ctrl_ops,
            "transitions": self.transitions,
            "dma_words": self.dma_words,
            "accel_invocations": self.accel_invocations,
            "accel_elements": self.accel_elements,
            "reboots": self.reboots,
        }

    def _trace_row(self, dead: int) -> tuple:
        c = self.counters()
        return (self.cycle, self.cycle_energy_uj, dead) + tuple(c.values())

    TRACE_HEADER = (
        "cycle",
        "live_energy_uj",
        "dead_flag",
        "vol_reads",
        "vol_writes",
        "nv_reads",
        "nv_writes",
        "alu_ops",
        "mul_ops",
        "ctrl_ops",
        "transitions",
        "dma_words",
        "accel_invocations",
        "accel_elements",
        "reboots",
    )


# -- configuration loading ----------------------------------------------


def load_device_config(source) -> dict:
    """Read a JSON device config from a path, file object, or dict."""
    if isinstance(source, dict):
        return source
    if hasattr(source, "read"):
        return json.load(source)
    return json.loads(Path(source).read_text())


def schedule_from_config(cfg: dict) -> PowerSchedule:
    mode = cfg.get("mode", "continuous")
    if mode == "continuous":
        return PowerSchedule.continuous()
    if mode == "fixed_budget":
        return PowerSchedule.fixed_budget(float(cfg["budget_uj"]))
    if mode == "trace":
        return PowerSchedule.trace(cfg["points_uj"])
    if mode == "seeded_random":
        return PowerSchedule.seeded_random(
            int(cfg["seed"]), float(cfg["low_uj"]), float(cfg["high_uj"])
        )
    if mode == "op_trace":
        return PowerSchedule.op_trace(cfg["fail_after_ops"])
    raise ContractViolation(f"unknown schedule mode {mode!r}")


def device_from_config(source, *, recorder: AccessRecorder | None = None) -> Device:
    """Build a Device from a config mapping/file.

    Recognized keys: "costs" (cost-model overrides), "buffer" (either
    {"preset": name} or {"capacity_uj": x}), "schedule", "volatile_bytes",
    "nonvolatile_bytes", "keep_trace".
    """
    cfg = load_device_config(source)
    costs = CostModel.from_dict(cfg.get("costs", {})) if cfg.get("costs") else CostModel()
    buf_cfg = cfg.get("buffer", {})
    if "preset" in buf_cfg:
        buffer = EnergyBuffer.from_preset(buf_cfg["preset"])
    elif "capacity_uj" in buf_cfg:
        buffer = EnergyBuffer(capacity_uj=float(buf_cfg["capacity_uj"]))
    else:
        buffer = EnergyBuffer(capacity_uj=math.inf)
    schedule = schedule_from_config(cfg.get("schedule", {"mode": "continuous"}))
    return Device(
        costs=costs,
        buffer=buffer,
        schedule=schedule,
        volatile_bytes=int(cfg.get("volatile_bytes", 4096)),
        nonvolatile_bytes=int(cfg.get("nonvolatile_bytes", 262144)),
        recorder=recorder,
        keep_trace=bool(cfg.get("keep_trace", False)),
    )


def write_trace_csv(device: Device, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(Device.TRACE_HEADER)
        w.writerows(device.trace_rows)
