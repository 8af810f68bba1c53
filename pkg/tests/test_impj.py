import pytest
from hypothesis import given, strategies as st

from intermittent.impj import (
    ImpjError,
    ImpjParams,
    accuracy_sweep,
    impj_baseline,
    impj_ideal,
    impj_inference,
    load_presets,
    params_from_preset,
)

# case-study inputs: rare events, cheap sensing, expensive link
WILDLIFE = dict(p=0.05, e_sense_j=0.010, e_comm_j=23.0)


def params(**kw):
    base = dict(p=0.05, t_p=1.0, t_n=1.0, e_sense_j=0.010, e_comm_j=23.0, e_infer_j=0.0)
    base.update(kw)
    return ImpjParams(**base)


def test_baseline_direct_evaluation():
    # p / (e_sense + e_comm) with the case-study inputs
    got = impj_baseline(params())
    assert got == pytest.approx(0.05 / 23.010, rel=1e-12)
    assert got == pytest.approx(0.0021730, rel=1e-4)


def test_baseline_zero_rate():
    assert impj_baseline(params(p=0.0)) == 0.0


def test_baseline_homogeneity():
    one = impj_baseline(params())
    half = impj_baseline(params(e_sense_j=0.020, e_comm_j=46.0))
    assert half == pytest.approx(one / 2)


def test_ideal_case_study_and_ratio():
    ideal = impj_ideal(params())
    assert ideal == pytest.approx(0.05 / 1.160, rel=1e-12)
    ratio = ideal / impj_baseline(params())
    assert ratio == pytest.approx(19.84, rel=0.001)  # about 1/p = 20x


def test_ideal_all_events_interesting_equals_baseline():
    assert impj_ideal(params(p=1.0)) == pytest.approx(impj_baseline(params(p=1.0)))


def test_ideal_free_communication():
    assert impj_ideal(params(e_comm_j=0.0)) == pytest.approx(0.05 / 0.010)


def test_inference_perfect_free_equals_ideal():
    p = params(t_p=1.0, t_n=1.0, e_infer_j=0.0)
    assert impj_inference(p) == pytest.approx(impj_ideal(p), rel=1e-12)


def test_result_only_communication_ratios():
    # communicating only the inference result divides e_comm by 98
    e_result = 23.0 / 98.0
    fast = params(e_comm_j=e_result, e_infer_j=0.026)
    got = impj_inference(fast)
    assert got == pytest.approx(1.0475, rel=1e-4)
    assert got / impj_baseline(params()) == pytest.approx(482.0, abs=0.5)

    naive = params(e_comm_j=e_result, e_infer_j=0.198)
    gn = impj_inference(naive)
    assert gn == pytest.approx(0.2276, rel=1e-3)
    assert got / gn == pytest.approx(4.60, rel=1e-3)

    ideal = impj_ideal(params(e_comm_j=e_result))
    assert ideal / got == pytest.approx(2.196, rel=1e-3)


def test_inference_never_beats_ideal():
    p = params(t_p=0.97, t_n=0.92, e_infer_j=0.02)
    assert impj_inference(p) <= impj_ideal(p)


@given(
    p=st.floats(0.001, 1.0),
    tp=st.floats(0.0, 1.0),
    tn=st.floats(0.0, 1.0),
    e_infer=st.floats(0.0, 5.0),
)
def test_inference_bounded_by_ideal_property(p, tp, tn, e_infer):
    q = ImpjParams(p=p, t_p=tp, t_n=tn, e_sense_j=0.01, e_comm_j=23.0,
                   e_infer_j=e_infer)
    assert impj_inference(q) <= impj_ideal(q) + 1e-15


@given(
    e1=st.floats(0.0, 2.0), e2=st.floats(0.0, 2.0),
    t1=st.floats(0.0, 1.0), t2=st.floats(0.0, 1.0),
)
def test_monotonicity_properties(e1, e2, t1, t2):
    lo_e, hi_e = sorted((e1, e2))
    lo_t, hi_t = sorted((t1, t2))
    base = params(t_p=0.9, t_n=0.9)
    # non-increasing in inference energy
    a = impj_inference(ImpjParams(0.05, 0.9, 0.9, 0.01, 23.0, lo_e))
    b = impj_inference(ImpjParams(0.05, 0.9, 0.9, 0.01, 23.0, hi_e))
    assert a >= b - 1e-15
    # non-decreasing in both rates
    assert (impj_inference(base.with_rates(hi_t, 0.9))
            >= impj_inference(base.with_rates(lo_t, 0.9)) - 1e-15)
    assert (impj_inference(base.with_rates(0.9, hi_t))
            >= impj_inference(base.with_rates(0.9, lo_t)) - 1e-15)


def test_accuracy_collapse_sweep_monotone():
    preset = load_presets()
    accs = [i / 50 for i in range(51)]
    for result_only in (False, True):
        rows = accuracy_sweep(preset, accs, result_only=result_only)
        for col in ("naive", "accelerated"):
            vals = [r[col] for r in rows]
            assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))


def test_presets_file_matches_case_study():
    preset = load_presets()
    assert preset["p"] == 0.05
    assert preset["e_sense_j"] == 0.010
    assert preset["e_comm_image_j"] == 23.0
    assert preset["e_comm_result_j"] == pytest.approx(23.0 / 98.0, rel=1e-12)
    fast = params_from_preset(preset, system="accelerated", result_only=True)
    assert impj_inference(fast) == pytest.approx(1.0475, rel=1e-4)


def test_parameter_validation():
    with pytest.raises(ImpjError):
        ImpjParams(p=1.5, t_p=1, t_n=1, e_sense_j=0.1, e_comm_j=1.0)
    with pytest.raises(ImpjError):
        ImpjParams(p=0.5, t_p=1, t_n=1, e_sense_j=-0.1, e_comm_j=1.0)
    with pytest.raises(ImpjError):
        impj_baseline(ImpjParams(p=0.5, t_p=1, t_n=1, e_sense_j=0.0, e_comm_j=0.0))
