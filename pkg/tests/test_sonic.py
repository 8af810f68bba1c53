import numpy as np
import pytest

from intermittent.device import AccessRecorder, Device, EnergyBuffer, PowerSchedule
from intermittent.fixtures import (
    DotProductLayout,
    dense_conv_net,
    dot_product_data,
    dot_product_oracle,
    fixture_input,
    loopcont_dot_product,
    loopcont_iteration_cost_uj,
    mixed_net,
    sparse_chain_net,
    tiny_conv_net,
    tiny_sparse_net,
)
from intermittent.image import NetImage
from intermittent.model import NetworkModel, reference_infer
from intermittent.runtime import NonTermination
from intermittent.sonic import SonicRunner, sonic_infer, sparse_control_words
from intermittent.fixedpoint import FixedTensor
from intermittent.model import Conv2d


def continuous_device(**kw):
    return Device(schedule=PowerSchedule.continuous(), **kw)


def count_ops(net, x, runner_cls=SonicRunner, **kw):
    dev = continuous_device()
    runner = runner_cls(net, dev, **kw)
    runner.load_input(x)
    runner.run()
    return dev.op_count


def run_with_failure_at(net, x, k, runner_cls=SonicRunner, **kw):
    dev = Device(schedule=PowerSchedule.op_trace([k]))
    runner = runner_cls(net, dev, **kw)
    runner.load_input(x)
    return runner.run()


def exhaustive_boundary_sweep(net, x, runner_cls=SonicRunner, stride=1, **kw):
    """Inject one failure at every metered-operation boundary; every run
    must reproduce the continuous-power oracle bit-for-bit."""
    ref = reference_infer(net, x).data.tolist()
    total = count_ops(net, x, runner_cls, **kw)
    for k in range(1, total + 1, stride):
        stats = run_with_failure_at(net, x, k, runner_cls, **kw)
        assert list(stats.scores) == ref, f"diverged with failure at op {k}"
        assert stats.reboots == 1
    return total


def test_conv_exhaustive_single_failure_sweep():
    net = tiny_conv_net()
    x = fixture_input(net)
    exhaustive_boundary_sweep(net, x)


def test_sparse_exhaustive_single_failure_sweep():
    net = tiny_sparse_net()
    x = fixture_input(net)
    exhaustive_boundary_sweep(net, x)


def test_failure_after_every_step_still_matches_oracle():
    # harsh periodic injection, repeatedly, for the whole run. The period
    # must exceed the minimum progress quantum (re-entry plus one committed
    # swap, ~25 ops); anything tighter is genuine non-termination, since an
    # atomic commit needs that much energy in one cycle.
    net = tiny_conv_net()
    x = fixture_input(net)
    ref = reference_infer(net, x).data.tolist()
    total = count_ops(net, x)
    dev = Device(schedule=PowerSchedule.op_trace(range(32, 50 * total, 32)))
    runner = SonicRunner(net, dev)
    runner.load_input(x)
    stats = runner.run()
    assert list(stats.scores) == ref
    assert stats.reboots >= 10


def test_pos_zero_pass_writes_product_alone():
    # with a single-tap conv and no epilogue work, the first pass output is
    # exactly the product of input and tap (no accumulate with stale state)
    w = FixedTensor.from_float([[[[0.5]]]])
    net = NetworkModel((Conv2d("c", w, None, shift=0, relu=False),), (1, 2, 2), 4)
    x = FixedTensor.from_float([[[0.5, -0.25], [0.125, 0.0]]])
    dev = continuous_device()
    # pre-fill the destination arena slots with garbage: a correct pos=0
    # pass must overwrite, not accumulate
    image_probe = NetImage(net)
    for slot in (1, 2):
        for i in range(image_probe.arena_elems):
            dev.mem.poke_nv(image_probe.arena[slot] + i, 1234)
    runner = SonicRunner(net, dev)
    runner.load_input(x)
    stats = runner.run()
    assert list(stats.scores) == reference_infer(net, x).data.tolist()


@pytest.mark.parametrize("make_net", [dense_conv_net, mixed_net, sparse_chain_net])
def test_sonic_continuous_matches_oracle(make_net):
    net = make_net()
    x = fixture_input(net)
    dev = continuous_device()
    stats = sonic_infer(net, x, dev)
    assert list(stats.scores) == reference_infer(net, x).data.tolist()
    assert stats.completed and stats.reboots == 0
    assert stats.redo_entries == 0  # no data words are ever redo-logged
    assert stats.reexecuted_steps == 0


@pytest.mark.parametrize("make_net", [dense_conv_net, mixed_net, sparse_chain_net])
def test_sonic_seeded_schedule_sweep(make_net):
    net = make_net()
    x = fixture_input(net)
    ref = reference_infer(net, x).data.tolist()
    for seed in range(100):
        dev = Device(
            buffer=EnergyBuffer(capacity_uj=900.0),
            schedule=PowerSchedule.seeded_random(seed, 300.0, 900.0),
        )
        stats = sonic_infer(net, x, dev)
        assert list(stats.scores) == ref, f"seed {seed} diverged"
        assert stats.reexecuted_steps <= stats.reboots


def test_sparse_undo_defining_case():
    # single-nonzero matrix; force a failure between the read-index advance
    # and the write-index advance of that nonzero: the resumed run must
    # recompute from the backup, not double-apply
    net = tiny_sparse_net(m=1, n=1, density=1.0, seed=1)
    x = fixture_input(net)
    ref = reference_infer(net, x).data.tolist()
    total = count_ops(net, x)
    # find the ops where rd/wr advance by scanning all boundaries; assert the
    # protocol invariant wr <= rd <= wr+1 at every failure point
    for k in range(1, total + 1):
        dev = Device(schedule=PowerSchedule.op_trace([k]))
        runner = SonicRunner(net, dev)
        runner.load_input(x)
        stats = runner.run()
        rd = dev.mem.peek_nv(runner.image.ctl["rd_idx"])
        wr = dev.mem.peek_nv(runner.image.ctl["wr_idx"])
        assert wr <= rd <= wr + 1 or (rd == 0 and wr == 0)  # reset after phase
        assert list(stats.scores) == ref


def test_sparse_zero_nonzero_matrix():
    net = tiny_sparse_net(m=3, n=3, density=0.0)
    assert net.layers[0].weight.nnz == 0
    x = fixture_input(net)
    dev = continuous_device()
    stats = sonic_infer(net, x, dev)
    assert list(stats.scores) == reference_infer(net, x).data.tolist()
    assert stats.undo_writes == 0 and stats.undo_backups == 0


def test_sparse_undo_write_accounting():
    # 90%-sparse layer: per modified element, the protocol writes twice
    # (backup + in-place update)
    net = tiny_sparse_net(m=16, n=16, density=0.1, seed=77)
    nnz = net.layers[0].weight.nnz
    assert nnz > 0
    x = fixture_input(net)
    ref = reference_infer(net, x).data.tolist()
    dev = continuous_device()
    stats = sonic_infer(net, x, dev)
    assert list(stats.scores) == ref
    assert stats.undo_backups == nnz
    assert stats.undo_writes == nnz
    assert stats.undo_backups + stats.undo_writes == 2 * nnz

    for seed in range(60):
        dev = Device(
            buffer=EnergyBuffer(capacity_uj=400.0),
            schedule=PowerSchedule.seeded_random(seed, 150.0, 400.0),
        )
        s = sonic_infer(net, x, dev)
        assert list(s.scores) == ref
        # retries may re-run the in-place write, never the backup of a
        # completed element
        assert s.undo_backups == nnz
        assert nnz <= s.undo_writes <= nnz + s.reboots


def test_sparse_constant_space_overhead():
    # the undo state is 3 words regardless of layer dimensions
    assert sparse_control_words() == 3
    footprints = []
    for m, n in ((8, 8), (32, 32), (128, 128)):
        net = tiny_sparse_net(m=m, n=n, density=0.1, seed=5)
        image = NetImage(net)
        ctl = image.ctl
        words = {ctl["rd_idx"], ctl["wr_idx"], ctl["backup"]}
        footprints.append(len(words))
        # run it and record every NV address the sparse protocol writes
        # beyond the output activations
        rec = AccessRecorder()
        dev = continuous_device(recorder=rec)
        runner = SonicRunner(net, dev)
        runner.load_input(fixture_input(net))
        runner.run()
        out_base = image.arena[runner.plan[0][2]]
        protocol_writes = {
            addr for kind, *rest in rec.events if kind == "nv_write"
            for addr in [rest[0]]
            if addr in words
        }
        assert protocol_writes <= words
    assert len(set(footprints)) == 1


def test_progress_monotonicity():
    # (stage, pos, idx) never moves backwards across reboots. The probe
    # reads the logical state: if a two-phase commit was in flight at the
    # failure, its pending entries are the state (recovery applies them
    # before any task code runs).
    net = mixed_net()
    x = fixture_input(net)
    dev = Device(
        buffer=EnergyBuffer(capacity_uj=500.0),
        schedule=PowerSchedule.seeded_random(11, 200.0, 500.0),
    )
    runner = SonicRunner(net, dev)
    runner.load_input(x)
    image = runner.image
    ctl = image.ctl
    seen = []

    def logical_ctl():
        peek = dev.mem.peek_nv
        words = {name: peek(addr) for name, addr in ctl.items()}
        if peek(image.log_base):  # commit flag set: overlay pending entries
            count = peek(image.log_base + 1)
            by_addr = {addr: name for name, addr in ctl.items()}
            for i in range(count):
                a = peek(image.log_base + 2 + 2 * i)
                v = peek(image.log_base + 2 + 2 * i + 1)
                if a in by_addr:
                    words[by_addr[a]] = v
        return words

    orig_reboot = dev.reboot

    def reboot_and_record():
        orig_reboot()
        w = logical_ctl()
        seen.append((w["layer"], w["pos"], w["wr_idx"], w["idx"]))

    dev.reboot = reboot_and_record
    runner.run()
    assert len(seen) > 3
    assert seen == sorted(seen)


def test_no_read_then_write_to_same_activation_location():
    # loop-ordered buffering: within one iteration, no activation word is
    # first read and then written
    net = dense_conv_net()
    x = fixture_input(net)
    rec = AccessRecorder()
    dev = continuous_device(recorder=rec)
    runner = SonicRunner(net, dev)
    runner.load_input(x)
    runner.run()
    arena_lo = runner.image.arena[0]
    arena_hi = arena_lo + 3 * runner.image.arena_elems

    reads: set = set()
    writes: set = set()
    checked = 0
    for ev in rec.events:
        if ev[0] == "mark" and ev[1] == "iter":
            # iteration boundary: check and reset
            assert not (reads & writes), "activation read then written in iteration"
            checked += 1
            reads, writes = set(), set()
        elif ev[0] == "nv_read" and arena_lo <= ev[1] < arena_hi:
            reads.add(ev[1])
        elif ev[0] == "nv_write" and arena_lo <= ev[1] < arena_hi and ev[1] not in reads:
            writes.add(ev[1])
    assert checked > 100


def test_unsafe_swap_diverges_under_injection():
    # the fault-injection variant must be detectably broken: some failure
    # boundary yields a wrong result (this is what crash sweeps exist for)
    net = tiny_conv_net()
    x = fixture_input(net)
    ref = reference_infer(net, x).data.tolist()
    total = count_ops(net, x, unsafe_swap=True)
    diverged = 0
    for k in range(1, total + 1):
        stats = run_with_failure_at(net, x, k, unsafe_swap=True)
        if list(stats.scores) != ref:
            diverged += 1
    assert diverged > 0


def test_sonic_fewer_transitions_than_tiled_8():
    # same schedule, identical scores, and loop continuation transitions
    # strictly less often than 8-iteration task tiling
    from intermittent.runtime import tiled_infer

    net = dense_conv_net()
    x = fixture_input(net)
    for schedule in (PowerSchedule.continuous(),
                     PowerSchedule.seeded_random(3, 1200.0, 2400.0)):
        dev_s = Device(buffer=EnergyBuffer(capacity_uj=2400.0), schedule=schedule)
        dev_t = Device(buffer=EnergyBuffer(capacity_uj=2400.0), schedule=schedule)
        ss = sonic_infer(net, x, dev_s)
        st = tiled_infer(net, x, dev_t, tile=8)
        assert ss.scores == st.scores
        assert ss.transitions < st.transitions


def test_activations_exceeding_nonvolatile_budget_rejected():
    rng = np.random.default_rng(1)
    big = NetworkModel(
        (Conv2d("c", FixedTensor.from_float(rng.uniform(-0.1, 0.1, (1, 1, 2, 2))),
                None, relu=False),),
        input_shape=(1, 260, 260),
        class_count=259 * 259,
    )
    dev = Device(schedule=PowerSchedule.continuous(), nonvolatile_bytes=65536)
    with pytest.raises(ValueError, match="NV words"):
        SonicRunner(big, dev)


def test_nontermination_when_iteration_exceeds_buffer():
    net = dense_conv_net()
    x = fixture_input(net)
    dev = Device(
        buffer=EnergyBuffer(capacity_uj=20.0),
        schedule=PowerSchedule.fixed_budget(20.0),  # less than one iteration
    )
    with pytest.raises(NonTermination) as ei:
        sonic_infer(net, x, dev)
    assert ei.value.demand_uj > 0


# -- loop-continuation dot product (the task-tiling comparison) ------------


def test_loopcont_dot_product_continuous():
    xs, ws = dot_product_data(20)
    dev = continuous_device()
    result, stats = loopcont_dot_product(xs, ws, dev)
    assert result == dot_product_oracle(xs, ws)
    assert stats.steps == 20


def test_loopcont_resumes_at_ninth_iteration():
    # buffer funds entry overhead plus 8.5 iterations: the first charge
    # cycle completes eight iterations and dies during the ninth; execution
    # resumes at the ninth, not at zero
    xs, ws = dot_product_data(20)
    costs = Device().costs
    iter_cost = loopcont_iteration_cost_uj(costs)
    entry = 2 * costs.nonvolatile_read
    capacity = entry + 8.5 * iter_cost

    dev = Device(
        buffer=EnergyBuffer(capacity_uj=capacity),
        schedule=PowerSchedule.fixed_budget(capacity),
    )
    wr_word = DotProductLayout(20).wr
    resumes = []
    orig_reboot = dev.reboot

    def reboot_and_record():
        orig_reboot()
        resumes.append(dev.mem.peek_nv(wr_word))

    dev.reboot = reboot_and_record
    result, stats = loopcont_dot_product(xs, ws, dev)
    assert result == dot_product_oracle(xs, ws)
    assert stats.reboots >= 1
    assert resumes[0] == 8  # zero-based index 8 is the ninth iteration
    assert stats.reexecuted_steps <= stats.reboots


def test_loopcont_never_skips_iterations_under_random_power():
    xs, ws = dot_product_data(20)
    expect = dot_product_oracle(xs, ws)
    for seed in range(50):
        dev = Device(
            buffer=EnergyBuffer(capacity_uj=400.0),
            schedule=PowerSchedule.seeded_random(seed, 60.0, 400.0),
        )
        result, stats = loopcont_dot_product(xs, ws, dev)
        assert result == expect
        assert stats.steps >= 20
        assert stats.reexecuted_steps <= stats.reboots
