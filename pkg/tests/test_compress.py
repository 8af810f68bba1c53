import numpy as np
import pytest

from intermittent.compress import (
    CompressionError,
    LayerChoice,
    NoFeasibleConfiguration,
    apply_compression,
    expand_grid,
    grid_from_file,
    hooi,
    hooi_separate,
    jacobi_svd,
    pareto_frontier,
    prune,
    search,
    svd_separate,
    write_report_csv,
)
from intermittent.device import CostModel
from intermittent.fixedpoint import FixedTensor
from intermittent.fixtures import fixture_dataset
from intermittent.impj import ImpjParams, impj_inference
from intermittent.model import (
    Conv2d,
    DenseFC,
    NetworkModel,
    reference_infer,
)


def ft(values, scale=0):
    return FixedTensor.from_float(values, scale)


# -- pruning -----------------------------------------------------------------


def test_prune_examples():
    w = ft([[0.5, 0.001], [-0.002, 0.8]])
    sm = prune(w, 0.01)
    assert sm.nnz == 2
    dense = sm.densify().to_float()
    assert dense[0][0] == pytest.approx(0.5, abs=1e-4)
    assert dense[1][1] == pytest.approx(0.8, abs=1e-4)


def test_prune_threshold_zero_counts_nonzeros():
    w = ft([[0.5, 0.0], [-0.002, 0.8]])
    assert prune(w, 0.0).nnz == 3


def test_prune_elementwise_oracle():
    rng = np.random.default_rng(9)
    wf = rng.uniform(-0.9, 0.9, size=(13, 17))
    w = ft(wf)
    t = 0.2
    got = prune(w, t).densify().data
    expect = np.where(np.abs(w.data) >= t * 32768.0, w.data, 0)
    assert np.array_equal(got, expect)


# -- SVD separation -----------------------------------------------------------


def test_jacobi_svd_reconstructs():
    rng = np.random.default_rng(4)
    for shape in ((6, 6), (8, 5), (4, 9)):
        a = rng.normal(size=shape)
        u, s, vt = jacobi_svd(a)
        assert np.allclose(u @ np.diag(s) @ vt, a, atol=1e-10)
        assert np.all(np.diff(s) <= 1e-12)
        assert np.allclose(u.T @ u, np.eye(u.shape[1]), atol=1e-10)


def test_svd_separate_rank1_exact():
    u = np.array([0.5, -0.3, 0.7])
    v = np.array([0.4, 0.9, -0.2, 0.1])
    w = ft(np.outer(u, v) * 0.8)
    a, b, fa, fb = svd_separate(w, 1)
    err = np.linalg.norm(fa @ fb - w.to_float())
    # quantizing the rank-1 matrix perturbs each entry by up to half an
    # LSB, so the residual is bounded by the quantization noise
    assert err <= np.sqrt(w.data.size) * 2.0**-16


def test_svd_separate_rank1_float_exact():
    u = np.array([0.5, -0.3, 0.7])
    v = np.array([0.4, 0.9, -0.2, 0.1])
    wf = np.outer(u, v) * 0.8
    uu, ss, vvt = jacobi_svd(wf)
    recon = ss[0] * np.outer(uu[:, 0], vvt[0])
    assert np.linalg.norm(recon - wf) <= 1e-12  # truly rank-1 input


def test_svd_separate_identity_full_rank():
    w = FixedTensor.from_float(np.eye(4) * 0.9)
    a, b, fa, fb = svd_separate(w, 4)
    assert np.allclose(fa @ fb, w.to_float(), atol=1e-10)


def test_svd_separate_matches_eigen_oracle():
    # independent oracle: eigendecomposition of W^T W gives the squared
    # singular values; best rank-k Frobenius error is the tail sum
    rng = np.random.default_rng(15)
    wf = rng.uniform(-0.5, 0.5, size=(8, 6))
    w = ft(wf)
    for k in (1, 3, 5):
        a, b, fa, fb = svd_separate(w, k)
        err = np.linalg.norm(fa @ fb - w.to_float())
        eigvals = np.linalg.eigvalsh(w.to_float().T @ w.to_float())
        expect = np.sqrt(max(np.sum(np.sort(eigvals)[: 6 - k]), 0.0))
        assert abs(err - expect) < 1e-6


def test_svd_separate_rank_out_of_range():
    w = ft(np.zeros((3, 4)) + 0.1)
    with pytest.raises(CompressionError):
        svd_separate(w, 0)
    with pytest.raises(CompressionError):
        svd_separate(w, 4)


# -- Tucker separation ---------------------------------------------------------


def _rank1_kernel(rng, dims, peak=0.85):
    a = rng.uniform(0.3, 1.0, size=dims[0])
    b = rng.uniform(0.3, 1.0, size=dims[1])
    c = rng.uniform(0.3, 1.0, size=dims[2])
    k = np.einsum("i,j,k->ijk", a, b, c)
    return k * (peak / np.abs(k).max())


def test_hooi_exactly_separable_reconstructs():
    rng = np.random.default_rng(21)
    kf = _rank1_kernel(rng, (3, 4, 5))
    # float-domain kernel is exactly separable: perfect fit
    _, _, fit_float, _ = hooi(kf, (1, 1, 1))
    assert fit_float >= 1.0 - 1e-12
    # the quantized kernel is separable up to quantization noise
    sep = hooi_separate(ft(kf))
    assert sep.fit >= 1.0 - 1e-4
    recon = np.einsum(
        "i,j,k->ijk",
        sep.f_ch.to_float(), sep.f_row.to_float(), sep.f_col.to_float(),
    )
    assert np.max(np.abs(recon - kf)) < 1e-3  # quantization-level error


def _best_rank1_fit_oracle(x, tries=30, iters=500, seed=0):
    """Randomized brute force: multi-start alternating power iteration for
    the best rank-1 approximation."""
    rng = np.random.default_rng(seed)
    norm_x = np.linalg.norm(x)
    best = 0.0
    for _ in range(tries):
        u, v, w = (rng.normal(size=d) for d in x.shape)
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        w /= np.linalg.norm(w)
        sigma = 0.0
        for _ in range(iters):
            u = np.einsum("ijk,j,k->i", x, v, w)
            u /= max(np.linalg.norm(u), 1e-300)
            v = np.einsum("ijk,i,k->j", x, u, w)
            v /= max(np.linalg.norm(v), 1e-300)
            w = np.einsum("ijk,i,j->k", x, u, v)
            nw = np.linalg.norm(w)
            w /= max(nw, 1e-300)
            if abs(nw - sigma) < 1e-13:
                sigma = nw
                break
            sigma = nw
        best = max(best, sigma)
    resid = np.sqrt(max(norm_x**2 - best**2, 0.0))
    return 1.0 - resid / norm_x


def test_hooi_rank111_matches_bruteforce():
    rng = np.random.default_rng(33)
    for trial in range(4):
        x = rng.normal(size=(3, 3, 3))
        _, _, fit, _ = hooi(x, (1, 1, 1))
        oracle = _best_rank1_fit_oracle(x, seed=trial)
        assert abs(fit - oracle) < 1e-4


def test_separated_conv_approximates_full_conv():
    # an exactly separable kernel: the three 1-D convolutions reproduce the
    # full convolution within quantization-level error
    rng = np.random.default_rng(40)
    kf = _rank1_kernel(rng, (2, 3, 3), peak=0.5)
    conv = Conv2d("c", FixedTensor.from_float(kf[None]), None, shift=0, relu=False)
    net_full = NetworkModel((conv,), (2, 6, 6), 16)
    choice = {"c": LayerChoice(rank=1)}
    net_sep = apply_compression(net_full, choice)
    assert net_sep.layers[0].kind == "conv1d_separated_triple"
    x = FixedTensor.from_float(rng.uniform(-0.4, 0.4, size=(2, 6, 6)))
    full = reference_infer(net_full, x).data.astype(int)
    sep = reference_infer(net_sep, x).data.astype(int)
    # documented bound: per-stage rounding of each tap plus filter
    # quantization, scaled by the tap counts of the three stages
    assert np.max(np.abs(full - sep)) <= 2 * (2 + 3 + 3 + 3)


def test_hooi_rejects_bad_ranks():
    with pytest.raises(CompressionError):
        hooi(np.zeros((2, 2, 2)), (1, 1))
    with pytest.raises(CompressionError):
        hooi(np.zeros((2, 2, 2)), (3, 1, 1))


# -- search --------------------------------------------------------------------


def _search_base_net():
    rng = np.random.default_rng(555)

    def t(shape, lo=-0.45, hi=0.45):
        return FixedTensor.from_float(rng.uniform(lo, hi, size=shape))

    return NetworkModel(
        (
            DenseFC("fc1", t((12, 16)), t((12,), -0.1, 0.1)),
            DenseFC("fc2", t((8, 12)), t((8,), -0.1, 0.1)),
            DenseFC("out", t((3, 8)), None, relu=False),
        ),
        input_shape=(16,),
        class_count=3,
    )


def _impj_params():
    # result-only communication so inference energy matters in selection
    return ImpjParams(p=0.05, t_p=1.0, t_n=1.0, e_sense_j=1e-5,
                      e_comm_j=2e-4, e_infer_j=0.0)


def _grid27():
    return {
        "fc1": [LayerChoice(), LayerChoice(prune=0.28), LayerChoice(rank=4)],
        "fc2": [LayerChoice(), LayerChoice(prune=0.25), LayerChoice(rank=3)],
        "out": [LayerChoice(), LayerChoice(prune=0.2), LayerChoice(rank=2)],
    }


def test_param_accounting_separated_pair():
    net = _search_base_net()
    sep = apply_compression(net, {"fc1": LayerChoice(rank=4)})
    pair = sep.layers[0]
    m, n = 12, 16
    assert pair.param_words() == 4 * (m + n) + m  # k(m+n) plus bias


def test_singleton_grid_chooses_it():
    net = _search_base_net()
    ds = fixture_dataset(net, n=30, seed=2)
    res = search(net, {"fc1": [LayerChoice(rank=4)]}, ds, _impj_params(),
                 memory_bound_bytes=10_000, costs=CostModel())
    assert len(res.configs) == 1
    assert res.chosen is res.configs[0]
    assert res.chosen.chosen


def test_search_27_grid_matches_bruteforce_argmax():
    net = _search_base_net()
    ds = fixture_dataset(net, n=36, seed=3)
    params = _impj_params()
    bound = net.param_bytes - 2  # the uncompressed config must not fit
    res = search(net, _grid27(), ds, params, bound, costs=CostModel())
    assert len(res.configs) == 27
    base_cfg = [c for c in res.configs if c.config_id.count("base") == 3]
    assert len(base_cfg) == 1 and not base_cfg[0].feasible

    # independent argmax: recompute the objective from the reported rates
    # and energies and scan every feasible configuration
    best = None
    for c in res.configs:
        if not c.feasible:
            continue
        val = impj_inference(
            ImpjParams(p=params.p, t_p=c.t_p, t_n=c.t_n,
                       e_sense_j=params.e_sense_j, e_comm_j=params.e_comm_j,
                       e_infer_j=c.e_infer_j)
        )
        key = (-val, c.e_infer_j, c.config_id)
        if best is None or key < best[0]:
            best = (key, c)
    assert res.chosen is best[1]


def test_frontier_correctness_property():
    net = _search_base_net()
    ds = fixture_dataset(net, n=36, seed=3)
    res = search(net, _grid27(), ds, _impj_params(), 10_000, costs=CostModel())
    for f in res.frontier:
        for other in res.configs:
            better_both = (other.accuracy >= f.accuracy
                           and other.e_infer_j <= f.e_infer_j
                           and (other.accuracy > f.accuracy
                                or other.e_infer_j < f.e_infer_j))
            assert not better_both


def test_equal_rates_prefer_lower_energy():
    net = _search_base_net()
    ds = fixture_dataset(net, n=36, seed=3)
    res = search(net, _grid27(), ds, _impj_params(), 10_000, costs=CostModel())
    ch = res.chosen
    for other in res.configs:
        if other.feasible and (other.t_p, other.t_n) == (ch.t_p, ch.t_n):
            assert ch.e_infer_j <= other.e_infer_j


def test_selection_is_not_simply_most_accurate():
    # with result-only communication the cheapest adequate configuration
    # wins; the most accurate one here is the expensive uncompressed net
    net = _search_base_net()
    ds = fixture_dataset(net, n=36, seed=3)
    res = search(net, _grid27(), ds, _impj_params(), 10_000, costs=CostModel())
    most_accurate = max(res.configs, key=lambda c: (c.accuracy, -c.e_infer_j))
    assert res.chosen.e_infer_j < most_accurate.e_infer_j
    assert res.chosen is not most_accurate


def test_search_determinism():
    net = _search_base_net()
    ds = fixture_dataset(net, n=36, seed=3)
    r1 = search(net, _grid27(), ds, _impj_params(), 10_000, costs=CostModel())
    r2 = search(net, _grid27(), ds, _impj_params(), 10_000, costs=CostModel())
    assert [c.row() for c in r1.configs] == [c.row() for c in r2.configs]
    assert [c.config_id for c in r1.frontier] == [c.config_id for c in r2.frontier]
    r3 = search(net, _grid27(), ds, _impj_params(), 10_000, costs=CostModel(),
                sample=(10, 7))
    r4 = search(net, _grid27(), ds, _impj_params(), 10_000, costs=CostModel(),
                sample=(10, 7))
    assert [c.config_id for c in r3.configs] == [c.config_id for c in r4.configs]


def test_no_feasible_configuration():
    net = _search_base_net()
    ds = fixture_dataset(net, n=12, seed=2)
    with pytest.raises(NoFeasibleConfiguration) as ei:
        search(net, {"fc1": [LayerChoice()]}, ds, _impj_params(), 10,
               costs=CostModel())
    assert ei.value.rows  # the report still carries every evaluated config


def test_grid_file_and_report_roundtrip(tmp_path):
    spec = {
        "layers": {
            "fc1": {"prune": [None, 0.25], "rank": [None, 4]},
            "out": {"rank": [None, 2]},
        }
    }
    p = tmp_path / "sweep.json"
    p.write_text(__import__("json").dumps(spec))
    grid = grid_from_file(p)
    assert len(grid["fc1"]) == 4 and len(grid["out"]) == 2
    points = expand_grid(grid)
    assert len(points) == 8
    assert len({cid for cid, _ in points}) == 8

    net = _search_base_net()
    ds = fixture_dataset(net, n=12, seed=2)
    res = search(net, grid, ds, _impj_params(), 10_000, costs=CostModel())
    out = tmp_path / "report.csv"
    write_report_csv(res.rows(), out)
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 1 + 8
    assert lines[0].startswith("config_id,")


def test_conv_choices_validated():
    rng = np.random.default_rng(3)
    conv2 = Conv2d("c", FixedTensor.from_float(rng.uniform(-0.3, 0.3, (2, 1, 2, 2))),
                   None)
    net = NetworkModel((conv2,), (1, 3, 3), 8)
    with pytest.raises(CompressionError):
        apply_compression(net, {"c": LayerChoice(rank=1)})  # needs one channel
    with pytest.raises(CompressionError):
        apply_compression(net, {"c": LayerChoice(prune=0.1)})  # conv stays dense
