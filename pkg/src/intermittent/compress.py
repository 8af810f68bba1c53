"""Compression search: pruning, low-rank separation, Pareto selection.

Two per-layer techniques shrink a base network: magnitude pruning drops
fully-connected weights below a threshold (CSR storage), and rank
separation factorizes a fully-connected layer into a rank-k pair via SVD or
a single-output-channel convolution kernel into three 1-D filters via
alternating per-mode orthogonal iteration (Tucker at ranks (1,1,1)). The
search sweeps a deterministic grid of per-layer choices, measures accuracy
and the per-class rates on a labeled dataset, estimates inference energy
from operation counts, builds the Pareto frontier over (accuracy, energy),
and selects the feasible configuration that maximizes estimated messages
per Joule. Picking the most accurate configuration instead is generally
wrong: it can overspend energy or lose on the per-class rates.

Factorizations run in float and are re-quantized to Q1.15 afterwards; each
factor carries a power-of-two scale that is folded into the layer's
activation shift.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .fixedpoint import FixedTensor, SparseMatrix
from .impj import ImpjParams, impj_inference
from .model import (
    Conv2d,
    DenseFC,
    LabeledDataset,
    NetworkModel,
    SeparatedPairFC,
    SeparatedTripleConv,
    SparseFC,
    estimate_inference_energy_uj,
    evaluate,
)


class CompressionError(ValueError):
    pass


class NoFeasibleConfiguration(RuntimeError):
    def __init__(self, message: str, rows: list | None = None):
        super().__init__(message)
        self.rows = rows or []


# -- pruning ---------------------------------------------------------------


def prune(weights: FixedTensor, threshold: float) -> SparseMatrix:
    """Drop entries with logical magnitude below the threshold; surviving
    entries are preserved exactly."""
    if threshold < 0:
        raise CompressionError("threshold must be non-negative")
    return SparseMatrix.from_dense(weights, threshold)


# -- one-sided Jacobi SVD ----------------------------------------------------


def jacobi_svd(a: np.ndarray, *, tol: float = 1e-13, max_sweeps: int = 60):
    """Singular value decomposition by one-sided Jacobi rotations.

    Returns (U, s, Vt) with singular values descending and each left
    singular vector's largest-magnitude component made positive (a
    deterministic sign convention). Rotations orthogonalize column pairs
    until all are numerically orthogonal; accurate for the small matrices
    this package factors.
    """
    a = np.asarray(a, dtype=np.float64)
    m, n = a.shape
    if m < n:
        u, s, vt = jacobi_svd(a.T, tol=tol, max_sweeps=max_sweeps)
        return vt.T, s, u.T
    w = a.copy()
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = float(w[:, p] @ w[:, p])
                beta = float(w[:, q] @ w[:, q])
                gamma = float(w[:, p] @ w[:, q])
                if alpha * beta == 0.0:
                    continue
                ratio = abs(gamma) / math.sqrt(alpha * beta)
                if ratio <= tol:
                    continue
                off = max(off, ratio)
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s_ = c * t
                wp = w[:, p].copy()
                w[:, p] = c * wp - s_ * w[:, q]
                w[:, q] = s_ * wp + c * w[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - s_ * v[:, q]
                v[:, q] = s_ * vp + c * v[:, q]
        if off <= tol:
            break
    sing = np.sqrt(np.sum(w * w, axis=0))
    order = np.argsort(-sing)
    sing = sing[order]
    w = w[:, order]
    v = v[:, order]
    u = np.zeros((m, n))
    for j in range(n):
        if sing[j] > 0:
            u[:, j] = w[:, j] / sing[j]
    # sign convention for determinism
    for j in range(n):
        k = int(np.argmax(np.abs(u[:, j])))
        if u[k, j] < 0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return u, sing, v.T


def _quantize_with_scale(arr: np.ndarray) -> FixedTensor:
    """Quantize a float array, choosing the smallest power-of-two scale
    that brings it into Q1.15 range."""
    peak = float(np.max(np.abs(arr))) if arr.size else 0.0
    scale = 0
    while peak >= 2.0 ** scale:
        scale += 1
    return FixedTensor.from_float(arr, scale=scale)


def svd_separate(w: FixedTensor, k: int):
    """Best rank-k factorization of an (m, n) weight matrix.

    Returns (a, b, float_a, float_b): quantized factors plus the
    pre-quantization floats. ``a @ b`` is the best rank-k approximation in
    Frobenius norm.
    """
    m, n = w.shape
    if not 1 <= k <= min(m, n):
        raise CompressionError(f"rank {k} out of range for {m}x{n}")
    wf = w.to_float()
    u, s, vt = jacobi_svd(wf)
    root = np.sqrt(s[:k])
    fa = u[:, :k] * root
    fb = root[:, None] * vt[:k, :]
    return _quantize_with_scale(fa), _quantize_with_scale(fb), fa, fb


# -- Tucker separation (alternating per-mode orthogonal iteration) ----------


def _unfold(x: np.ndarray, mode: int) -> np.ndarray:
    return np.moveaxis(x, mode, 0).reshape(x.shape[mode], -1)


def _mode_mult(x: np.ndarray, u: np.ndarray, mode: int) -> np.ndarray:
    # multiply along `mode` by u.T (project onto the factor basis)
    moved = np.moveaxis(x, mode, 0)
    shape = moved.shape
    out = (u.T @ moved.reshape(shape[0], -1)).reshape((u.shape[1],) + shape[1:])
    return np.moveaxis(out, 0, mode)


def _leading_vectors(mat: np.ndarray, r: int) -> np.ndarray:
    u, _, _ = jacobi_svd(mat)
    return u[:, :r]


def hooi(x: np.ndarray, ranks, *, tol: float = 1e-6, max_iter: int = 100):
    """Tucker decomposition by alternating per-mode SVD of unfoldings.

    Initializes factors from the unfolding SVDs, then cycles modes until
    the fit improves by less than ``tol`` or the iteration budget runs out.
    Returns (core, factors, fit, converged); ``fit`` is 1 minus the
    relative reconstruction error.
    """
    x = np.asarray(x, dtype=np.float64)
    ranks = tuple(ranks)
    if len(ranks) != x.ndim:
        raise CompressionError("one rank per tensor mode required")
    for d, (r, dim) in enumerate(zip(ranks, x.shape)):
        if not 1 <= r <= dim:
            raise CompressionError(f"rank {r} invalid for mode {d} of size {dim}")
    norm_x = float(np.sqrt(np.sum(x * x)))
    if norm_x == 0.0:
        core = np.zeros(ranks)
        return core, [np.eye(d, r) for d, r in zip(x.shape, ranks)], 1.0, True
    factors = [_leading_vectors(_unfold(x, m), r) for m, r in enumerate(ranks)]
    fit = 0.0
    converged = False
    for _ in range(max_iter):
        for mode in range(x.ndim):
            y = x
            for other in range(x.ndim):
                if other != mode:
                    y = _mode_mult(y, factors[other], other)
            factors[mode] = _leading_vectors(_unfold(y, mode), ranks[mode])
        core = x
        for mode in range(x.ndim):
            core = _mode_mult(core, factors[mode], mode)
        core_norm_sq = float(np.sum(core * core))
        resid = math.sqrt(max(norm_x * norm_x - core_norm_sq, 0.0))
        new_fit = 1.0 - resid / norm_x
        if abs(new_fit - fit) < tol:
            fit = new_fit
            converged = True
            break
        fit = new_fit
    core = x
    for mode in range(x.ndim):
        core = _mode_mult(core, factors[mode], mode)
    return core, factors, fit, converged


@dataclass(frozen=True)
class SeparatedFilters:
    f_ch: FixedTensor
    f_row: FixedTensor
    f_col: FixedTensor
    scale_sum: int
    fit: float
    converged: bool


def hooi_separate(kernel: FixedTensor, ranks=(1, 1, 1), *, tol: float = 1e-6,
                  max_iter: int = 100) -> SeparatedFilters:
    """Separate a 3-way convolution kernel into three 1-D filters.

    At ranks (1,1,1) the Tucker core is a scalar gain, distributed evenly
    (with its sign on the first filter) so the three filters applied in
    sequence reconstruct the rank-1 approximation. Non-convergence returns
    the best iterate with the converged flag cleared.
    """
    if tuple(ranks) != (1, 1, 1):
        raise CompressionError("separation into three 1-D filters needs ranks (1,1,1)")
    kf = np.asarray(kernel.to_float(), dtype=np.float64)
    if kf.ndim != 3:
        raise CompressionError("separable kernels are 3-way (channels, rows, cols)")
    core, factors, fit, converged = hooi(kf, ranks, tol=tol, max_iter=max_iter)
    g = float(core.reshape(-1)[0])
    mag = abs(g) ** (1.0 / 3.0)
    f0 = factors[0][:, 0] * math.copysign(mag, g)
    f1 = factors[1][:, 0] * mag
    f2 = factors[2][:, 0] * mag
    q0, q1, q2 = (_quantize_with_scale(f) for f in (f0, f1, f2))
    return SeparatedFilters(q0, q1, q2, q0.scale + q1.scale + q2.scale,
                            fit, converged)


# -- configuration space ------------------------------------------------------


@dataclass(frozen=True)
class LayerChoice:
    """Per-layer compression choice: a prune threshold and/or a separation
    rank. None leaves that technique off."""

    prune: float | None = None
    rank: int | None = None

    def tag(self) -> str:
        parts = []
        if self.prune is not None:
            parts.append(f"p{self.prune:g}")
        if self.rank is not None:
            parts.append(f"r{self.rank}")
        return "+".join(parts) if parts else "base"


@dataclass
class CompressionConfig:
    """One grid point plus the metrics the evaluation pipeline fills in."""

    config_id: str
    choices: dict
    net: NetworkModel | None = None
    param_bytes: int = 0
    op_count: int = 0
    accuracy: float = 0.0
    t_p: float = 0.0
    t_n: float = 0.0
    e_infer_j: float = 0.0
    impj: float = 0.0
    feasible: bool = False
    chosen: bool = False

    def row(self) -> dict:
        return {
            "config_id": self.config_id,
            "param_bytes": self.param_bytes,
            "op_count": self.op_count,
            "accuracy": self.accuracy,
            "t_p": self.t_p,
            "t_n": self.t_n,
            "e_infer_j": self.e_infer_j,
            "impj": self.impj,
            "feasible": int(self.feasible),
            "chosen": int(self.chosen),
        }


def _compress_dense(lay: DenseFC, choice: LayerChoice):
    if choice.rank is not None and choice.prune is not None:
        # separate, then prune both factors: two chained sparse layers
        a, b, _, _ = svd_separate(lay.weight, choice.rank)
        sa = SparseMatrix.from_dense(a, choice.prune)
        sb = SparseMatrix.from_dense(b, choice.prune)
        first = SparseFC(f"{lay.name}.b", sb, None, shift=-b.scale, relu=False)
        second = SparseFC(f"{lay.name}.a", sa, lay.bias,
                          shift=lay.shift - a.scale, relu=lay.relu)
        return [first, second]
    if choice.rank is not None:
        a, b, _, _ = svd_separate(lay.weight, choice.rank)
        return [SeparatedPairFC(lay.name, a, b, lay.bias,
                                shift=lay.shift - a.scale - b.scale, relu=lay.relu)]
    if choice.prune is not None:
        return [SparseFC(lay.name, prune(lay.weight, choice.prune), lay.bias,
                         shift=lay.shift, relu=lay.relu)]
    return [lay]


def _compress_conv(lay: Conv2d, choice: LayerChoice):
    if choice.prune is not None:
        raise CompressionError(
            f"layer {lay.name}: convolution storage is dense; pruning applies "
            "to fully-connected layers"
        )
    if choice.rank is None:
        return [lay]
    o = lay.weight.shape[0]
    if o != 1:
        raise CompressionError(
            f"layer {lay.name}: separation into three 1-D filters needs a "
            "single output channel"
        )
    sep = hooi_separate(FixedTensor(lay.weight.data[0], lay.weight.scale))
    return [SeparatedTripleConv(lay.name, sep.f_ch, sep.f_row, sep.f_col,
                                lay.bias, shift=lay.shift - sep.scale_sum,
                                relu=lay.relu)]


def apply_compression(net: NetworkModel, choices: dict) -> NetworkModel:
    """Build the compressed network for a set of per-layer choices."""
    layers = []
    for lay in net.layers:
        choice = choices.get(lay.name, LayerChoice())
        if choice.prune is None and choice.rank is None:
            layers.append(lay)
        elif lay.kind == "fc_dense":
            layers.extend(_compress_dense(lay, choice))
        elif lay.kind == "conv2d":
            layers.extend(_compress_conv(lay, choice))
        else:
            raise CompressionError(
                f"layer {lay.name} ({lay.kind}) takes no compression choices"
            )
    return NetworkModel(tuple(layers), net.input_shape, net.class_count)


def expand_grid(grid: dict) -> list[tuple[str, dict]]:
    """Cartesian product of per-layer choice lists, in deterministic order.

    ``grid`` maps layer name to a list of LayerChoice. Returns (config_id,
    choices) pairs.
    """
    names = sorted(grid)
    option_lists = [grid[name] for name in names]
    out = []
    for combo in itertools.product(*option_lists):
        choices = dict(zip(names, combo))
        cid = "|".join(f"{n}={c.tag()}" for n, c in zip(names, combo))
        out.append((cid, choices))
    return out


def grid_from_file(path) -> dict:
    """Read a sweep definition: {"layers": {name: {"prune": [...], "rank":
    [...]}}}. Null entries mean "leave off"; the grid is the per-layer
    cross product of the two lists."""
    spec = json.loads(open(path).read())
    grid = {}
    for name, opts in spec["layers"].items():
        prunes = opts.get("prune", [None])
        ranks = opts.get("rank", [None])
        grid[name] = [
            LayerChoice(prune=p, rank=r)
            for p in prunes
            for r in ranks
        ]
    return grid


# -- Pareto frontier and selection -------------------------------------------


def pareto_frontier(configs) -> list:
    """Non-dominated configurations under (maximize accuracy, minimize
    inference energy)."""
    out = []
    for c in configs:
        dominated = any(
            (d.accuracy >= c.accuracy and d.e_infer_j <= c.e_infer_j)
            and (d.accuracy > c.accuracy or d.e_infer_j < c.e_infer_j)
            for d in configs
        )
        if not dominated:
            out.append(c)
    return out


@dataclass
class SearchResult:
    configs: list
    frontier: list
    chosen: CompressionConfig

    def rows(self) -> list[dict]:
        return [c.row() for c in self.configs]


def search(base_net: NetworkModel, grid: dict, dataset: LabeledDataset,
           impj_params: ImpjParams, memory_bound_bytes: int, costs,
           *, interesting_class: int = 0,
           sample: tuple[int, int] | None = None) -> SearchResult:
    """Evaluate every grid point, build the frontier, pick the feasible
    configuration maximizing estimated messages per Joule.

    Infeasible configurations (parameter bytes over the memory bound) are
    evaluated and reported but excluded from selection. ``sample`` is an
    optional (count, seed) deterministic subsample of the grid. Ties break
    toward lower inference energy, then lexicographic id.
    """
    points = expand_grid(grid)
    if not points:
        raise CompressionError("empty sweep grid")
    if sample is not None:
        count, seed = sample
        rng = np.random.default_rng(seed)
        idx = sorted(rng.choice(len(points), size=min(count, len(points)),
                                replace=False).tolist())
        points = [points[i] for i in idx]

    configs: list[CompressionConfig] = []
    for cid, choices in points:
        cfg = CompressionConfig(cid, choices)
        net = apply_compression(base_net, choices)
        metrics = evaluate(net, dataset, interesting_class)
        cfg.net = net
        cfg.param_bytes = net.param_bytes
        cfg.op_count = net.mac_count()
        cfg.accuracy = metrics["accuracy"]
        cfg.t_p = metrics["t_p"]
        cfg.t_n = metrics["t_n"]
        cfg.e_infer_j = estimate_inference_energy_uj(net, costs) * 1e-6
        cfg.impj = impj_inference(
            replace(impj_params, t_p=cfg.t_p, t_n=cfg.t_n, e_infer_j=cfg.e_infer_j)
        )
        cfg.feasible = cfg.param_bytes <= memory_bound_bytes
        configs.append(cfg)

    frontier = pareto_frontier(configs)
    feasible = [c for c in configs if c.feasible]
    if not feasible:
        raise NoFeasibleConfiguration(
            f"no configuration fits in {memory_bound_bytes} bytes",
            rows=[c.row() for c in configs],
        )
    chosen = min(feasible, key=lambda c: (-c.impj, c.e_infer_j, c.config_id))
    chosen.chosen = True
    return SearchResult(configs=configs, frontier=frontier, chosen=chosen)


REPORT_FIELDS = ("config_id", "param_bytes", "op_count", "accuracy", "t_p",
                 "t_n", "e_infer_j", "impj", "feasible", "chosen")


def write_report_csv(rows: list[dict], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow(row)
