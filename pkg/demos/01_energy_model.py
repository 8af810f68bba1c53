"""Why local inference accuracy decides end-to-end performance.

A battery-less camera node monitors wildlife: interesting photos are rare
(p = 0.05), sensing is cheap (10 mJ), and sending one image over the
long-range radio is enormously expensive (23 J). We compare interesting
messages per Joule (IMpJ) for a system that sends everything, an impossible
ideal that sends only the interesting readings, and systems with imperfect
local inference.
"""

from intermittent.impj import (
    ImpjParams,
    accuracy_sweep,
    impj_baseline,
    impj_ideal,
    impj_inference,
    load_presets,
    params_from_preset,
)

preset = load_presets()
print(f"case study: {preset['name']}  (p={preset['p']}, "
      f"sense={preset['e_sense_j']*1e3:.0f} mJ, image={preset['e_comm_image_j']:.0f} J)")

base = ImpjParams(p=preset["p"], t_p=1, t_n=1,
                  e_sense_j=preset["e_sense_j"], e_comm_j=preset["e_comm_image_j"])
print(f"\nsend-everything baseline: {impj_baseline(base):.6f} messages/J")
print(f"ideal (sends only interesting): {impj_ideal(base):.6f} messages/J "
      f"-> {impj_ideal(base)/impj_baseline(base):.1f}x better (about 1/p)")

# Full-image communication: inference barely matters because the radio
# dominates; accuracy is everything.
print("\nIMpJ vs accuracy, full-image communication:")
for row in accuracy_sweep(preset, [0.6, 0.8, 0.9, 0.95, 1.0]):
    print(f"  acc={row['accuracy']:.2f}  naive={row['naive']:.6f}  "
          f"accelerated={row['accelerated']:.6f}  ideal={row['ideal']:.6f}")

# Sending only the inference result shrinks e_comm by 98x; now inference
# energy is a first-order cost and the efficient runtime pulls ahead.
print("\nIMpJ vs accuracy, result-only communication:")
for row in accuracy_sweep(preset, [0.6, 0.8, 0.9, 0.95, 1.0], result_only=True):
    print(f"  acc={row['accuracy']:.2f}  naive={row['naive']:.4f}  "
          f"accelerated={row['accelerated']:.4f}  ideal={row['ideal']:.4f}")

fast = params_from_preset(preset, system="accelerated", result_only=True)
naive = params_from_preset(preset, system="naive", result_only=True)
ideal_r = ImpjParams(p=preset["p"], t_p=1, t_n=1,
                     e_sense_j=preset["e_sense_j"], e_comm_j=preset["e_comm_result_j"])
print(f"\nresult-only accelerated vs full-image baseline: "
      f"{impj_inference(fast)/impj_baseline(base):.0f}x")
print(f"accelerated vs naive inference: "
      f"{impj_inference(fast)/impj_inference(naive):.2f}x")
print(f"remaining gap to ideal: {impj_ideal(ideal_r)/impj_inference(fast):.2f}x")
