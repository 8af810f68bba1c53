"""Compressing a network to maximize messages per Joule.

A base network that does not fit the device's memory is swept across
per-layer pruning thresholds and separation ranks. Every configuration is
measured (accuracy, per-class rates) and costed (operation counts times
per-operation energy); the search keeps the Pareto frontier over
(accuracy, energy) and picks the feasible configuration with the best
estimated messages per Joule, which is usually not the most accurate one.
"""

import numpy as np

from intermittent.compress import LayerChoice, search
from intermittent.device import CostModel
from intermittent.fixedpoint import FixedTensor
from intermittent.fixtures import fixture_dataset
from intermittent.impj import ImpjParams
from intermittent.model import DenseFC, NetworkModel

rng = np.random.default_rng(555)


def t(shape, lo=-0.45, hi=0.45):
    return FixedTensor.from_float(rng.uniform(lo, hi, size=shape))


base = NetworkModel(
    (DenseFC("fc1", t((12, 16)), t((12,), -0.1, 0.1)),
     DenseFC("fc2", t((8, 12)), t((8,), -0.1, 0.1)),
     DenseFC("out", t((3, 8)), None, relu=False)),
    input_shape=(16,), class_count=3,
)
dataset = fixture_dataset(base, n=36, seed=5)
budget_bytes = base.param_bytes - 2  # the uncompressed net must not fit
print(f"base net: {base.param_bytes} parameter bytes; device budget "
      f"{budget_bytes} bytes -> must compress")

grid = {
    "fc1": [LayerChoice(), LayerChoice(prune=0.28), LayerChoice(rank=4)],
    "fc2": [LayerChoice(), LayerChoice(prune=0.25), LayerChoice(rank=3)],
    "out": [LayerChoice(), LayerChoice(prune=0.2), LayerChoice(rank=2)],
}
params = ImpjParams(p=0.05, t_p=1, t_n=1, e_sense_j=1e-5, e_comm_j=2e-4,
                    e_infer_j=0.0)
result = search(base, grid, dataset, params, budget_bytes, CostModel(),
                interesting_class=0)

print(f"\nevaluated {len(result.configs)} configurations; "
      f"{sum(c.feasible for c in result.configs)} fit in memory")
print("\nPareto frontier (accuracy vs inference energy):")
for c in sorted(result.frontier, key=lambda c: c.e_infer_j):
    mark = " <-- chosen" if c.chosen else ""
    feas = "fits " if c.feasible else "over budget"
    print(f"  {c.config_id:34s} acc={c.accuracy:.3f} t_p={c.t_p:.2f} "
          f"t_n={c.t_n:.2f} E={c.e_infer_j*1e6:6.0f} uJ "
          f"impj={c.impj:7.2f} [{feas}]{mark}")

most_accurate = max(result.configs, key=lambda c: c.accuracy)
print(f"\nchosen: {result.chosen.config_id}")
print(f"most accurate ({most_accurate.config_id}, acc={most_accurate.accuracy:.3f}) "
      f"was NOT selected: it costs {most_accurate.e_infer_j*1e6:.0f} uJ per "
      f"inference vs {result.chosen.e_infer_j*1e6:.0f} uJ, and messages per "
      f"Joule is what the application feels")
