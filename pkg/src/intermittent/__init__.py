"""Library for simulating DNN inference on intermittently powered devices.

Sub-modules:

- ``fixedpoint``: Q1.15 fixed-point arithmetic, tensors, and sparse matrices.
- ``device``: simulated energy-harvesting device (energy buffer, cost model,
  volatile/non-volatile memory, power schedules, failure injection).
- ``model``: layer and network descriptions, the continuous-power reference
  inference oracle, dataset/archive file formats.
- ``runtime``: task-based intermittent execution with redo-logging, task
  tiling, and the naive (intermittence-oblivious) baseline.
- ``sonic``: loop-continuation execution of layers with loop-ordered
  buffering and sparse undo-logging.
- ``tails``: simulated DMA + vector accelerator on top of the
  loop-continuation runtime, with one-time tile calibration.
- ``compress``: magnitude pruning, low-rank separation (SVD / alternating
  per-mode orthogonal iteration), Pareto sweep and selection.
- ``impj``: analytical application-level energy model (interesting
  messages per Joule).
- ``cli``: experiment driver with CSV/JSON reports.
"""

__version__ = "0.1.0"

from .device import (  # noqa: F401
    CostModel,
    Device,
    EnergyBuffer,
    MemorySpace,
    PowerFailure,
    PowerSchedule,
)
from .fixedpoint import FixedTensor, SparseMatrix, qadd, qmul  # noqa: F401
from .model import NetworkModel, reference_infer  # noqa: F401
from .runtime import NonTermination, RunStats  # noqa: F401
