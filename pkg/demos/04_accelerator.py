"""Vector acceleration under intermittent power.

The simulated accelerator only reads the small volatile operating buffer,
so work moves through DMA in tiles. The workable tile size depends on the
energy buffer and is found once by halving: attempt a DMA-in / FIR /
DMA-out round trip, and each time power fails first, retry with half the
tile. We then compare per-inference energy across runtimes on the
conv-heavy fixture.
"""

from intermittent.device import Device, EnergyBuffer, PowerSchedule
from intermittent.fixtures import dense_conv_net, fixture_input
from intermittent.runtime import naive_infer, tiled_infer
from intermittent.sonic import sonic_infer
from intermittent.tails import (
    AcceleratorConfig,
    calibrate,
    calibration_attempt_cost_uj,
    tails_infer,
)

acfg = AcceleratorConfig()
costs = Device().costs

print("tile calibration by halving (initial tile 256):")
for elems in (300, 150, 70, 20):
    budget = calibration_attempt_cost_uj(costs, acfg, elems, success=True)
    dev = Device(buffer=EnergyBuffer(capacity_uj=budget),
                 schedule=PowerSchedule.fixed_budget(budget))
    res = calibrate(dev, acfg=acfg, initial_tile=256)
    print(f"  buffer pays a {elems:3d}-element round trip -> "
          f"attempts {list(res.attempts)} -> tile {res.tile}")

net = dense_conv_net()
x = fixture_input(net)
print("\nper-inference energy on the conv-heavy fixture (continuous power):")
rows = []
for name, run in (
    ("naive (no intermittence support)", lambda d: naive_infer(net, x, d)),
    ("tiled:8 (redo-logged tasks)", lambda d: tiled_infer(net, x, d, tile=8)),
    ("loop continuation (software)", lambda d: sonic_infer(net, x, d)),
    ("loop continuation + accelerator", lambda d: tails_infer(net, x, d)),
):
    dev = Device(schedule=PowerSchedule.continuous())
    stats = run(dev)
    rows.append((name, stats))
    print(f"  {name:34s} {stats.total_energy_uj:9.0f} uJ   "
          f"accel elements: {stats.device['accel_elements']:5d}   "
          f"dma words: {stats.device['dma_words']:5d}")

t = rows[3][1].total_energy_uj
print(f"\naccelerated vs software loop continuation: "
      f"{rows[2][1].total_energy_uj / t:.2f}x less energy")
print(f"accelerated vs tiled tasks: {rows[1][1].total_energy_uj / t:.2f}x less energy")
print("(sparse fully-connected layers always run in software: padding "
      "their filters for the accelerator costs more than it saves)")
