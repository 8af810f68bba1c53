"""Executing one loop three ways on a weak energy buffer.

A 20-element dot product runs on a device whose buffer funds roughly ten
loop iterations per charge cycle. Task tiling splits the loop into
fixed-size atomic tasks: a small tile fits but re-executes the partial tile
lost at each failure, and a 12-iteration tile can never finish. Loop
continuation instead keeps the loop indices in non-volatile memory and
resumes at the interrupted iteration, wasting at most one iteration per
outage.
"""

from intermittent.device import Device, EnergyBuffer, PowerSchedule
from intermittent.fixtures import (
    dot_product_data,
    dot_product_oracle,
    loopcont_dot_product,
    tiled_dot_product,
    tiled_iteration_cost_uj,
)
from intermittent.runtime import NonTermination

xs, ws = dot_product_data(20)
expect = dot_product_oracle(xs, ws)
costs = Device().costs
capacity = 10.6 * tiled_iteration_cost_uj(costs)
print(f"oracle result: {expect}")
print(f"buffer: {capacity:.0f} uJ per charge cycle "
      f"(~{capacity / tiled_iteration_cost_uj(costs):.1f} loop iterations)\n")


def fresh():
    return Device(buffer=EnergyBuffer(capacity_uj=capacity),
                  schedule=PowerSchedule.fixed_budget(capacity))


result, s5 = tiled_dot_product(xs, ws, 5, fresh())
print(f"tile-5:  result={result}  reboots={s5.reboots}  "
      f"re-executed iterations={s5.reexecuted_steps}  energy={s5.total_energy_uj:.0f} uJ")

try:
    tiled_dot_product(xs, ws, 12, fresh())
except NonTermination as e:
    print(f"tile-12: never finishes; its task burned {e.demand_uj:.0f} uJ in a "
          f"full cycle without committing")

result, slc = loopcont_dot_product(xs, ws, fresh())
print(f"loop continuation: result={result}  reboots={slc.reboots}  "
      f"re-executed iterations={slc.reexecuted_steps}  "
      f"energy={slc.total_energy_uj:.0f} uJ")
print("\nloop continuation wastes at most one iteration per outage and "
      "needs no per-task commit of the accumulator.")
