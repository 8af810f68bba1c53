"""Proving crash consistency by failure injection.

Every runtime must produce bit-identical class scores no matter where
power fails. We check the loop-continuation runtime two ways: one forced
failure at every single metered-operation boundary of a tiny layer
(exhaustive), and hundreds of seeded random power schedules on a bigger
fixture. A deliberately broken variant (its buffer swap skips the atomic
commit) shows the harness actually catches divergence.
"""

from intermittent.cli import run_crash_sweep
from intermittent.device import Device, EnergyBuffer, PowerSchedule
from intermittent.fixtures import fixture_input, mixed_net, tiny_conv_net
from intermittent.model import reference_infer
from intermittent.sonic import SonicRunner, sonic_infer

tiny = tiny_conv_net()
x_tiny = fixture_input(tiny)
summary = run_crash_sweep(tiny, x_tiny, "sonic", seeds=100,
                          budget_lo=250, budget_hi=700, exhaustive=True)
print(f"tiny conv layer: {summary['boundaries']} exhaustive boundaries + "
      f"{summary['seeds']} seeds -> divergences: {len(summary['divergences'])}")

net = mixed_net()
x = fixture_input(net)
expect = reference_infer(net, x).data.tolist()
bad = 0
for seed in range(300):
    dev = Device(buffer=EnergyBuffer(capacity_uj=900.0),
                 schedule=PowerSchedule.seeded_random(seed, 320.0, 900.0))
    stats = sonic_infer(net, x, dev)
    bad += list(stats.scores) != expect
print(f"mixed fixture: 300 random schedules -> divergences: {bad}")

# Mutation check: break the atomicity of the buffer swap and watch the
# sweep light up.
broken = run_crash_sweep(
    tiny, x_tiny, "sonic(unsafe-swap)", seeds=0, budget_lo=250, budget_hi=700,
    exhaustive=True,
    runner_factory=lambda n, d: SonicRunner(n, d, unsafe_swap=True),
)
print(f"broken swap variant: {len(broken['divergences'])} of "
      f"{broken['boundaries']} boundaries diverge "
      f"(first at op {broken['divergences'][0]['id']})")
