import math
import random

import pytest

from corpuspipe.run_controller import (
    Action,
    ControllerConfig,
    InvalidDistribution,
    LossSpikeController,
    LrSchedule,
    NoCheckpointAvailable,
    NonMonotonicStep,
    OutOfRange,
    cross_entropy,
    lr_at,
    simulate_run,
)


def test_schedule_validation():
    with pytest.raises(ValueError):
        LrSchedule(total_steps=4000, peak=0.0)
    with pytest.raises(ValueError):
        LrSchedule(total_steps=2000, warmup_steps=2000)
    with pytest.raises(ValueError):
        LrSchedule(total_steps=100, warmup_steps=0)


def test_lr_endpoints_and_peak():
    sched = LrSchedule(total_steps=4000)
    assert lr_at(0, sched) == 0.0
    assert lr_at(2000, sched) == 1e-4
    assert lr_at(4000, sched) == 0.0


def test_lr_continuity_at_warmup_boundary():
    sched = LrSchedule(total_steps=10000, peak=3e-4, warmup_steps=2000)
    up = lr_at(2000, sched)
    # both branches evaluate to peak exactly at the boundary
    down = sched.peak * ((sched.total_steps - 2000) / (sched.total_steps - 2000))
    assert abs(up - down) <= 1e-15 * sched.peak
    assert up == sched.peak


def test_lr_piecewise_linear_and_bounded():
    sched = LrSchedule(total_steps=300, peak=2e-4, warmup_steps=100)
    values = [lr_at(s, sched) for s in range(301)]
    assert max(values) == sched.peak
    for s in range(1, 100):
        assert values[s] == pytest.approx((values[s - 1] + values[s + 1]) / 2)
    for s in range(101, 300):
        assert values[s] == pytest.approx((values[s - 1] + values[s + 1]) / 2)


def test_lr_out_of_range():
    sched = LrSchedule(total_steps=4000)
    with pytest.raises(OutOfRange):
        lr_at(-1, sched)
    with pytest.raises(OutOfRange):
        lr_at(4001, sched)


def test_cross_entropy_uniform():
    vocab = 32000
    uniform = [1.0 / vocab] * vocab
    result = cross_entropy(lambda prefix: uniform, [5, 17, 31999, 0, 123])
    assert abs(result.nats - math.log(32000)) < 1e-9
    assert result.perplexity == pytest.approx(32000)


def test_cross_entropy_deterministic_correct():
    seq = [3, 1, 4, 1, 5]

    def oracle(prefix):
        probs = [0.0] * 8
        probs[seq[len(prefix)]] = 1.0
        return probs

    result = cross_entropy(oracle, seq)
    assert result.nats == 0.0
    assert result.perplexity == 1.0


def test_cross_entropy_unigram_matches_empirical_entropy():
    seq = [0, 1, 1, 2, 2, 2]
    counts = {0: 1, 1: 2, 2: 3}
    freqs = [counts.get(v, 0) / len(seq) for v in range(3)]
    # brute-force empirical unigram entropy over the explicit counts
    entropy = -sum((c / len(seq)) * math.log(c / len(seq)) for c in counts.values())
    result = cross_entropy(lambda prefix: freqs, seq)
    assert result.nats == pytest.approx(entropy, abs=1e-12)


def test_cross_entropy_invalid_distribution():
    with pytest.raises(InvalidDistribution):
        cross_entropy(lambda prefix: [0.0, 1.0], [0])
    with pytest.raises(InvalidDistribution):
        cross_entropy(lambda prefix: [-0.5, 1.5], [0])


def test_cross_entropy_token_outside_vocab():
    with pytest.raises(ValueError):
        cross_entropy(lambda prefix: [0.5, 0.5], [7])


def test_cross_entropy_properties_random_oracles():
    rng = random.Random(10)
    vocab = 20
    for _ in range(10):
        weights = [rng.random() + 1e-9 for _ in range(vocab)]
        total = sum(weights)
        dist = [w / total for w in weights]
        seq = [rng.randrange(vocab) for _ in range(rng.randint(1, 30))]
        ce = cross_entropy(lambda prefix: dist, seq).nats
        assert ce >= 0.0
        # ln(vocab) upper-bounds the best constant model on any sequence
        freqs = [max(seq.count(v), 1e-12) / len(seq) for v in range(vocab)]
        best_constant = cross_entropy(lambda prefix: freqs, seq).nats
        assert best_constant <= math.log(vocab) + 1e-12


def test_checkpoint_registry():
    ctrl = LossSpikeController()
    ctrl.record_checkpoint(500, "a")
    assert ctrl.checkpoints == [(500, "a")]
    with pytest.raises(NonMonotonicStep):
        ctrl.record_checkpoint(400, "b")
    with pytest.raises(NonMonotonicStep):
        ctrl.record_checkpoint(500, "b")
    ctrl.record_checkpoint(1000, "c")
    assert ctrl.latest_before(999) == (500, "a")
    assert ctrl.latest_before(1001) == (1000, "c")
    assert ctrl.latest_before(500) is None


def test_constant_stream_no_actions():
    sched = LrSchedule(total_steps=4000)
    trace = simulate_run(sched, [2.0] * 1000, checkpoint_interval=500)
    assert all(row.action == Action(kind="none") for row in trace)
    assert [row.step for row in trace] == list(range(1, 1001))
    for row in trace:
        assert row.lr == lr_at(row.step, sched)


def test_single_spike_rollback_and_recovery():
    sched = LrSchedule(total_steps=4000)
    losses = [2.0] * 699 + [20.0] + [2.0] * 250
    trace = simulate_run(sched, losses, checkpoint_interval=500)

    # observation 700 is at step 700; the window is full of 2.0 so any
    # loss above the mean trips the threshold; rollback to checkpoint 500
    spike_row = trace[699]
    assert spike_row.action == Action(
        kind="rollback", rollback_to=500, lr_multiplier=0.7
    )
    assert spike_row.step == 500
    assert spike_row.lr == lr_at(500, sched) * 0.7

    # recovery: 200 calm observations later the multiplier is restored
    restore_row = trace[899]
    assert restore_row.action == Action(kind="restore_lr", lr_multiplier=1.0)
    assert restore_row.step == 700
    assert restore_row.lr == lr_at(700, sched)

    for row in trace[700:899]:
        assert row.action == Action(kind="none", lr_multiplier=0.7)
        assert row.lr == lr_at(row.step, sched) * 0.7
    for row in trace[900:]:
        assert row.action == Action(kind="none")
        assert row.lr == lr_at(row.step, sched)


def test_step_counter_decreases_once_then_resumes():
    sched = LrSchedule(total_steps=4000)
    losses = [2.0] * 699 + [20.0] + [2.0] * 100
    steps = [row.step for row in simulate_run(sched, losses, 500)]
    decreases = [i for i in range(1, len(steps)) if steps[i] < steps[i - 1]]
    assert len(decreases) == 1
    assert steps[decreases[0]] == 500
    assert steps[decreases[0] : decreases[0] + 3] == [500, 501, 502]


def test_two_spikes_two_recoveries():
    sched = LrSchedule(total_steps=4000)
    losses = [2.0] * 699 + [30.0] + [2.0] * 300 + [30.0] + [2.0] * 250
    trace = simulate_run(sched, losses, checkpoint_interval=500)
    kinds = [row.action.kind for row in trace]
    assert kinds.count("rollback") == 2
    assert kinds.count("restore_lr") == 2
    # rollback at obs 700 (step 700 -> 500) and obs 1001 (step 801 -> 500);
    # each restore comes exactly 200 calm observations after its rollback
    assert kinds[699] == "rollback" and trace[699].step == 500
    assert kinds[899] == "restore_lr" and trace[899].step == 700
    assert kinds[1000] == "rollback" and trace[1000].step == 500
    assert kinds[1200] == "restore_lr" and trace[1200].step == 700


def test_non_finite_losses_are_spikes():
    cfg = ControllerConfig()
    for bad in (float("nan"), float("inf")):
        ctrl = LossSpikeController(config=cfg)
        ctrl.record_checkpoint(1, "start")
        ctrl.step(2.0)  # step 1
        ctrl.step(2.0)  # step 2
        action = ctrl.step(bad)  # step 3: spike without a full window
        assert action.kind == "rollback"
        assert action.rollback_to == 1


def test_spike_before_any_checkpoint():
    ctrl = LossSpikeController()
    with pytest.raises(NoCheckpointAvailable):
        ctrl.step(float("nan"))


def test_no_threshold_spike_until_window_full():
    cfg = ControllerConfig(window=10, k=4.0, stable_steps=5)
    ctrl = LossSpikeController(config=cfg)
    ctrl.record_checkpoint(1, "start")
    ctrl.step(1.0)
    for _ in range(8):
        assert ctrl.step(100.0).kind == "none"  # window not yet full
    # window now holds 1.0 and eight 100.0; value above mean + 4*std spikes
    assert ctrl.step(1.0).kind == "none"
    assert ctrl.step(1000.0).kind == "rollback"


def test_multiplier_discipline():
    sched = LrSchedule(total_steps=4000)
    losses = [2.0] * 699 + [50.0] + [2.0] * 400
    trace = simulate_run(sched, losses, checkpoint_interval=500)
    recovering = False
    for row in trace:
        if row.action.kind == "rollback":
            recovering = True
        multiplier = row.lr / lr_at(row.step, sched) if lr_at(row.step, sched) else None
        if row.action.kind == "restore_lr":
            recovering = False
        if multiplier is not None:
            expected = 0.7 if recovering else 1.0
            assert multiplier == pytest.approx(expected)


def test_simulate_run_deterministic():
    sched = LrSchedule(total_steps=4000)
    rng = random.Random(2)
    losses = [2.0 + rng.random() * 0.1 for _ in range(600)]
    losses[550] = 99.0
    a = simulate_run(sched, losses, checkpoint_interval=100)
    b = simulate_run(sched, losses, checkpoint_interval=100)
    assert a == b


def test_simulate_run_validation():
    sched = LrSchedule(total_steps=4000)
    with pytest.raises(ValueError):
        simulate_run(sched, [], 100)
    with pytest.raises(ValueError):
        simulate_run(sched, [1.0], 0)


def test_rollback_does_not_rerecord_checkpoints():
    # after rolling back past a recorded checkpoint step, re-reaching it must
    # not raise NonMonotonicStep
    sched = LrSchedule(total_steps=4000)
    losses = [2.0] * 599 + [40.0] + [2.0] * 700
    trace = simulate_run(sched, losses, checkpoint_interval=100)
    assert trace[599].action.kind == "rollback"
    assert trace[599].step == 500
    # 700 calm observations after the rollback walk steps 501..1200,
    # re-passing the old checkpoint steps without re-recording them
    assert [row.step for row in trace[-3:]] == [1198, 1199, 1200]
