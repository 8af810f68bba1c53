"""Application-level energy model: interesting messages per Joule (IMpJ).

A sensing application spends energy on sensing, local inference, and
communication; only a fraction ``p`` of events is worth communicating.
IMpJ is the number of interesting messages sent per Joule of harvested
energy, for three system designs:

- baseline: no local inference, every reading is sent;
- ideal: an impossible system that sends exactly the interesting readings;
- inference: a realistic system with true positive rate ``t_p`` and true
  negative rate ``t_n`` that pays ``e_infer`` per reading and also sends
  the false positives.

False negatives are not captured by the metric (an interesting reading
that is never sent simply does not count); high accuracy keeps them rare.
All energies are Joules.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources


class ImpjError(ValueError):
    pass


@dataclass(frozen=True)
class ImpjParams:
    p: float        # base rate of interesting events
    t_p: float      # true positive rate
    t_n: float      # true negative rate
    e_sense_j: float
    e_comm_j: float
    e_infer_j: float = 0.0

    def __post_init__(self):
        for name in ("p", "t_p", "t_n"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ImpjError(f"{name} must be in [0, 1], got {v}")
        for name in ("e_sense_j", "e_comm_j", "e_infer_j"):
            if getattr(self, name) < 0:
                raise ImpjError(f"{name} must be non-negative")

    def with_rates(self, t_p: float, t_n: float) -> "ImpjParams":
        return replace(self, t_p=t_p, t_n=t_n)


def impj_baseline(params: ImpjParams) -> float:
    """Messages per Joule when every reading is communicated."""
    denom = params.e_sense_j + params.e_comm_j
    if denom <= 0:
        raise ImpjError("baseline needs e_sense + e_comm > 0")
    return params.p / denom


def impj_ideal(params: ImpjParams) -> float:
    """Messages per Joule when only the interesting readings are sent."""
    denom = params.e_sense_j + params.p * params.e_comm_j
    if denom <= 0:
        raise ImpjError("ideal needs a positive energy denominator")
    return params.p / denom


def impj_inference(params: ImpjParams) -> float:
    """Messages per Joule with imperfect local inference.

    Sent traffic is the true positives plus the falsely sent uninteresting
    readings at rate (1 - p)(1 - t_n).
    """
    send_rate = params.p * params.t_p + (1.0 - params.p) * (1.0 - params.t_n)
    denom = (params.e_sense_j + params.e_infer_j) + send_rate * params.e_comm_j
    if denom <= 0:
        raise ImpjError("inference needs a positive energy denominator")
    return params.p * params.t_p / denom


def load_presets(path=None) -> dict:
    """Load IMpJ presets; the packaged file holds the wildlife-monitoring
    case-study numbers."""
    if path is not None:
        return json.loads(open(path).read())
    with resources.files("intermittent").joinpath("presets/wildlife.json").open() as fh:
        return json.load(fh)


def params_from_preset(preset: dict, *, system: str = "accelerated",
                       result_only: bool = False,
                       t_p: float = 1.0, t_n: float = 1.0) -> ImpjParams:
    """Turn a preset dict into ImpjParams for one of the local-inference
    systems ("naive" or "accelerated")."""
    e_comm = preset["e_comm_result_j"] if result_only else preset["e_comm_image_j"]
    e_infer = {
        "naive": preset["e_infer_naive_j"],
        "accelerated": preset["e_infer_accelerated_j"],
    }[system]
    return ImpjParams(
        p=preset["p"], t_p=t_p, t_n=t_n,
        e_sense_j=preset["e_sense_j"], e_comm_j=e_comm, e_infer_j=e_infer,
    )


def accuracy_sweep(preset: dict, accuracies, *, result_only: bool = False) -> list[dict]:
    """Rows of IMpJ versus accuracy (t_p = t_n = accuracy) for the baseline,
    ideal, naive-inference, and accelerated-inference systems.

    The baseline always communicates the full reading; with ``result_only``
    the inference systems communicate only the inference result.
    """
    base = ImpjParams(
        p=preset["p"], t_p=1.0, t_n=1.0,
        e_sense_j=preset["e_sense_j"], e_comm_j=preset["e_comm_image_j"],
    )
    rows = []
    for acc in accuracies:
        naive = params_from_preset(preset, system="naive",
                                   result_only=result_only, t_p=acc, t_n=acc)
        fast = params_from_preset(preset, system="accelerated",
                                  result_only=result_only, t_p=acc, t_n=acc)
        ideal = replace(base, e_comm_j=(preset["e_comm_result_j"] if result_only
                                        else preset["e_comm_image_j"]))
        rows.append({
            "accuracy": acc,
            "baseline": impj_baseline(base),
            "ideal": impj_ideal(ideal),
            "naive": impj_inference(naive),
            "accelerated": impj_inference(fast),
        })
    return rows
