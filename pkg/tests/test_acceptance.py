"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale experiments (criteria 7-9, 12) share module-scoped fixture
runs. Everything is pinned to seed 42; runtimes are asserted against each
criterion's budget. Run with `pytest -s tests/test_acceptance.py` to see the
per-criterion lines.
"""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fsbd import attack, data, fl, metrics, nn, robust
from fsbd.config import DatasetConfig, ExperimentConfig
from fsbd.runner import (ExperimentRunner, _sweep_prefix, load_triggers, sweep_delta,
                         sweep_epsilon, sweep_t_delta)

SEED = 42
THREADS = 2


def desk_config(mode="perdoor", aggregator="fedavg", total=320, seed=SEED, window_stable=30):
    # t_delta 1e-7 is the desk-scale operating point: same quantile of the
    # inter-round variance distribution as the full-scale default
    return ExperimentConfig(
        seed=seed, out="unused",
        dataset=DatasetConfig(kind="synthetic", classes=10, per_class=500, test_per_class=100),
        rounds=fl.RoundConfig(n=20, m=5, rounds=total, local_epochs=2, local_lr=0.1,
                              batch_size=32, seed=seed, malicious_ids=frozenset({0})),
        backdoor=attack.BackdoorConfig(t_delta=1e-7),
        aggregator=aggregator, attack_mode=mode,
        injection="stable", window_stable=window_stable, window_volatile=20,
        inject_trigger_count=15, eval_limit=1000)


def report(number, passed, detail, started=None):
    took = f" [{time.time() - started:.1f}s]" if started is not None else ""
    print(f"\nACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {detail}{took}")


def run_fixture(tmp_factory, config, name):
    out = tmp_factory.mktemp(name)
    runner = ExperimentRunner(config, threads=THREADS)
    log = runner.run(out)
    return runner, log, out


def post_injection(runner, log):
    record = runner.adversary.record
    assert record is not None, "run never injected"
    return record.round, [row for row in log if row["round"] > record.round]


@pytest.fixture(scope="module")
def perdoor_run(tmp_path_factory):
    return run_fixture(tmp_path_factory, desk_config("perdoor", "fedavg"), "perdoor")


@pytest.fixture(scope="module")
def baseline_run(tmp_path_factory):
    return run_fixture(tmp_path_factory, desk_config("baseline-single-shot", "fedavg"), "baseline")


@pytest.fixture(scope="module")
def foolsgold_run(tmp_path_factory):
    return run_fixture(tmp_path_factory, desk_config("perdoor", "foolsgold", total=220), "foolsgold")


@pytest.fixture(scope="module")
def krum_run(tmp_path_factory):
    return run_fixture(tmp_path_factory, desk_config("perdoor", "krum"), "krum")


@pytest.fixture(scope="module")
def sweep_prefix_point():
    return _sweep_prefix(desk_config("perdoor", "fedavg"), threads=THREADS)


# ------------------------------------------------------------- criterion 1


def grad_check_topology():
    # ~1.5k parameters, well under the 5k cap
    return nn.ModelTopology(
        layers=(nn.Conv(1, 3, 3), nn.Relu(), nn.MaxPool(2), nn.Flatten(),
                nn.Dense(3 * 5 * 5, 16), nn.Relu(), nn.Dense(16, 6), nn.LogSoftmax()),
        input_shape=(1, 12, 12), classes=6)


def central_diff(f, model, i, h):
    vp = model.params.values.copy()
    vp[i] += h
    vm = model.params.values.copy()
    vm[i] -= h
    return (f(model.with_params(nn.ParamVector(vp, model.params.layout)))
            - f(model.with_params(nn.ParamVector(vm, model.params.layout)))) / (2 * h)


def test_criterion_1_gradient_correctness():
    started = time.time()
    topo = grad_check_topology()
    rng = np.random.default_rng(SEED)
    checked = 0
    for trial in range(10):
        model32 = nn.init_model(topo, SEED + trial)
        model = model32.astype(np.float64)
        x = rng.uniform(0, 1, (2, 1, 12, 12))
        y = rng.integers(0, 6, 2)
        x1 = x[0]
        layer = int(rng.choice(topo.parameterized_layers()))
        g_loss = nn.grad_loss_params(model, x, y)
        g_inp = nn.grad_loss_input(model, x1, int(y[0]))
        dw, db = nn.grad_logit_params(model, x1, int(y[1]), layer)
        g_logit = np.concatenate([dw.ravel(), db.ravel()])
        sl = model.params.layer_slice(layer)

        loss_fn = lambda m: nn.nll_loss(nn.forward(m, x), y)
        out_fn = lambda m: float(nn.forward(m, x1[None])[0, int(y[1])])
        for i in rng.choice(model.params.size, 40, replace=False):
            fd = central_diff(loss_fn, model, int(i), 1e-6)
            assert abs(g_loss.values[i] - fd) <= 1e-5 * max(abs(fd), abs(g_loss.values[i]), 1e-7)
            checked += 1
        for k in rng.choice(sl.stop - sl.start, 30, replace=False):
            fd = central_diff(out_fn, model, sl.start + int(k), 1e-6)
            assert abs(g_logit[k] - fd) <= 1e-5 * max(abs(fd), abs(g_logit[k]), 1e-7)
            checked += 1
        for _ in range(30):
            px = tuple(rng.integers(0, s) for s in topo.input_shape)
            h = 1e-6
            xp = x1.copy()
            xp[px] += h
            xm = x1.copy()
            xm[px] -= h
            fd = (nn.nll_loss(nn.forward(model, xp[None]), y[:1])
                  - nn.nll_loss(nn.forward(model, xm[None]), y[:1])) / (2 * h)
            assert abs(g_inp[px] - fd) <= 1e-5 * max(abs(fd), abs(g_inp[px]), 1e-7)
            checked += 1
        # 32-bit branch: h=1e-3, relative 1e-3 above the float32 quotient noise floor
        g32 = nn.grad_loss_params(model32, x.astype(np.float32), y)
        loss32 = lambda m: nn.nll_loss(nn.forward(m, x.astype(np.float32)), y)
        for i in rng.choice(model32.params.size, 30, replace=False):
            fd = central_diff(loss32, model32, int(i), 1e-3)
            assert abs(g32.values[i] - fd) <= 1e-3 * max(abs(fd), abs(g32.values[i])) + 3e-4
            checked += 1
    took = time.time() - started
    ok = took < 60 and checked >= 100 * 10
    report(1, ok, f"3 gradient flavors vs central differences, {checked} coordinates "
                  f"across 10 models (64-bit rel 1e-5; 32-bit rel 1e-3 + 3e-4 floor)", started)
    assert ok


# ------------------------------------------------------------- criterion 2


def test_criterion_2_fedavg_oracle():
    started = time.time()
    rng = np.random.default_rng(SEED)
    cases = 0
    for _ in range(20):
        m = int(rng.integers(1, 11))
        d = int(rng.integers(8, 1001))
        topo = nn.ModelTopology(
            layers=(nn.Flatten(), nn.Dense(d, 2), nn.LogSoftmax()),
            input_shape=(1, 1, d), classes=2)
        layout = topo.make_layout()
        size = sum(s.length for s in layout)
        g_vals = rng.normal(0, 1, size).astype(np.float32)
        model = nn.Model(topo, nn.ParamVector(g_vals, layout))
        deltas = rng.normal(0, 1, (m, size)).astype(np.float32)
        counts = rng.integers(1, 50, m)
        updates = [fl.UpdateMessage(i, nn.ParamVector(deltas[i], layout), int(counts[i]))
                   for i in range(m)]
        out = fl.fedavg_aggregate(model, updates)
        total = float(counts.sum())
        for i in rng.choice(size, 50, replace=False):
            hand = float(g_vals[i])
            for j in range(m):
                hand += (float(counts[j]) / total) * float(deltas[j, i])
            assert abs(float(out.params.values[i]) - hand) < 1e-6
            cases += 1
    took = time.time() - started
    ok = took < 1.0
    report(2, ok, f"weighted-average aggregation matches scalar per-element reference "
                  f"on {cases} elements across 20 random update sets", started)
    assert ok


# ------------------------------------------------------------- criterion 3


def krum_reference(deltas, f):
    m = len(deltas)
    k = m - f - 2 if m >= 2 * f + 3 else m - 1
    best, best_score = None, None
    for i in range(m):
        dists = sorted(
            float(np.sum((np.asarray(deltas[i], np.float64) - np.asarray(deltas[j], np.float64)) ** 2))
            for j in range(m) if j != i)
        score = sum(dists[:k]) if k > 0 else 0.0
        if best_score is None or score < best_score:
            best, best_score = i, score
    return best


def test_criterion_3_krum_oracle():
    started = time.time()
    rng = np.random.default_rng(SEED)
    for _ in range(200):
        m = int(rng.integers(3, 11))
        d = int(rng.integers(4, 64))
        f = int(rng.integers(0, max(1, (m - 2) // 2)))
        deltas = rng.normal(0, 1, (m, d))
        assert robust.krum_select(deltas, f) == krum_reference(deltas, f)
    took = time.time() - started
    ok = took < 10
    report(3, ok, "selected index matches exhaustive brute force on 200 random instances (m <= 10)",
           started)
    assert ok


# ------------------------------------------------------------- criterion 4


def test_criterion_4_foolsgold_sybil_property():
    started = time.time()
    rng = np.random.default_rng(SEED)
    topo = nn.ModelTopology(
        layers=(nn.Flatten(), nn.Dense(32, 3), nn.LogSoftmax()),
        input_shape=(1, 1, 32), classes=3)
    layout = topo.make_layout()
    size = sum(s.length for s in layout)
    model = nn.Model(topo, nn.ParamVector(np.zeros(size, np.float32), layout))
    state = robust.FoolsGoldState()
    sybil_dir = np.zeros(size, np.float32)
    sybil_dir[:8] = rng.normal(0, 1, 8)
    for round_no in range(3):
        # orthogonal honest updates: disjoint coordinate blocks, fresh magnitudes
        honest = []
        for h in range(4):
            d = np.zeros(size, np.float32)
            block = slice(8 + 8 * h, 8 + 8 * (h + 1))
            d[block] = rng.normal(0, 1, 8)
            honest.append(d)
        updates = [fl.UpdateMessage(i, nn.ParamVector(d, layout), 10)
                   for i, d in enumerate([sybil_dir.copy(), sybil_dir.copy()] + honest)]
        robust.foolsgold_aggregate(model, updates, state)
    weights = robust.foolsgold_weights(np.stack([state.histories[i] for i in range(6)]))
    sybil_ok = weights[0] < 0.05 and weights[1] < 0.05
    honest_ok = all(w >= 0.95 for w in weights[2:])
    took = time.time() - started
    ok = sybil_ok and honest_ok and took < 10
    report(4, ok, f"after 3 rounds: identical-update weights {weights[0]:.4f}/{weights[1]:.4f} "
                  f"< 0.05; orthogonal weights {[f'{w:.2f}' for w in weights[2:]]} >= 0.95", started)
    assert ok


# ------------------------------------------------------------- criterion 5


def test_criterion_5_mask_exactness():
    started = time.time()
    topo = grad_check_topology()
    model = nn.init_model(topo, SEED)
    rng = np.random.default_rng(SEED)
    images = rng.uniform(0, 1, (30, 1, 12, 12)).astype(np.float32)
    labels = (np.arange(30) % 6).astype(np.int64)
    ds = data.Dataset(images, labels, 6)
    cfg = attack.BackdoorConfig(source_label=0, target_label=3, trigger_count=5,
                                bim_iters=3, inject_iters=2, delta=1e-3)
    triggers = attack.trigger_test_set(model, ds, cfg, count=5)
    for case in range(100):
        bits = rng.random(model.params.size) < rng.uniform(0.02, 0.98)
        if not bits.any():
            bits[int(rng.integers(model.params.size))] = True
        out = attack.inject_backdoor(model, attack.ParamMask(bits), triggers, cfg)
        same = out.params.values == model.params.values
        assert same[~bits].all(), f"case {case}: unmasked coordinate changed"
    took = time.time() - started
    ok = took < 60
    report(5, ok, "unmasked parameters bitwise equal to the global model on 100 fuzzed masks",
           started)
    assert ok


# ------------------------------------------------------------- criterion 6


def test_criterion_6_bim_bound():
    started = time.time()
    train = data.synthetic(10, 500, seed=1)
    model = nn.init_model(nn.small_cnn(), SEED)
    pool = train.label_indices(0)
    assert pool.size >= 334
    total = 0
    for eps in (0.05, 0.075, 0.1):
        cfg = attack.BackdoorConfig(epsilon=eps, bim_iters=30, source_label=0, target_label=6)
        images = train.images[pool[:334]]
        x_hats = attack._bim_batch(model, images, cfg.target_label, cfg)
        etas = x_hats - images
        assert float(np.abs(etas).max()) <= float(np.float32(eps))
        assert x_hats.min() >= 0.0 and x_hats.max() <= 1.0
        total += len(images)
    cfg0 = attack.BackdoorConfig(epsilon=0.0, bim_iters=5, source_label=0, target_label=6)
    entry = attack.bim_generate(model, train.images[pool[0]], 6, cfg0)
    assert np.array_equal(entry.x_hat, train.images[pool[0]])
    took = time.time() - started
    ok = total >= 1000 and took < 120
    report(6, ok, f"L-inf bound holds exactly for {total} triggers across eps in "
                  f"{{0.05, 0.075, 0.1}}; eps=0 returns the source bitwise", started)
    assert ok


# ------------------------------------------------------------- criterion 7


def test_criterion_7_persistence(perdoor_run, baseline_run):
    started = time.time()
    p_runner, p_log, _ = perdoor_run
    b_runner, b_log, _ = baseline_run
    p_inj, p_post = post_injection(p_runner, p_log)
    b_inj, b_post = post_injection(b_runner, b_log)
    assert p_inj == b_inj, "both attacks inject at the same stable point"
    p_acc = np.array([r["acc_backdoor"] for r in p_post[:200]])
    b_acc = np.array([r["acc_backdoor"] for r in b_post[:200]])
    assert len(p_acc) == 200 and len(b_acc) == 200
    assert np.mean([r["acc_main"] for r in p_post[:200]]) >= 0.9  # trained regime
    ratio_ok = p_acc.mean() >= 2 * b_acc.mean()
    end_ok = p_acc[199] >= 0.5 and b_acc[199] <= 0.3
    ok = ratio_ok and end_ok
    report(7, ok, f"seed {SEED}, injection round {p_inj}: mean Acc_B over 200 rounds "
                  f"{p_acc.mean():.3f} vs baseline {b_acc.mean():.3f} "
                  f"(>= 2x); at +200: {p_acc[199]:.3f} >= 0.5, baseline {b_acc[199]:.3f} <= 0.3",
           started)
    assert ok


# ------------------------------------------------------------- criterion 8


def test_criterion_8_stealthiness(sweep_prefix_point):
    started = time.time()
    config = desk_config("perdoor", "fedavg")
    rows = sweep_delta(config, [1e-5, 1e-4, 1e-3], prefix=sweep_prefix_point)
    by_delta = {row["delta"]: row for row in rows}
    acc_gap = abs(by_delta[1e-5]["acc_main"] - by_delta[0.0]["acc_main"])
    ckas = [by_delta[v]["cka"] for v in (1e-5, 1e-4, 1e-3)]
    monotone = all(a >= b for a, b in zip(ckas, ckas[1:]))
    ok = acc_gap <= 0.02 and monotone and ckas[0] >= ckas[-1]
    took = time.time() - started
    ok = ok and took < 1200
    report(8, ok, f"delta=1e-5 Acc_M within {acc_gap:.4f} of no-attack; CKA grid "
                  f"{[f'{c:.6f}' for c in ckas]} nonincreasing", started)
    assert ok


def test_epsilon_direction(sweep_prefix_point):
    # cmd_sweep example: mean post-injection Acc_B nondecreasing in epsilon
    config = desk_config("perdoor", "fedavg")
    rows = sweep_epsilon(config, [0.05, 0.075, 0.1], post_rounds=20, prefix=sweep_prefix_point)
    means = [row["mean_acc_backdoor"] for row in rows]
    assert all(b >= a - 1e-9 for a, b in zip(means, means[1:]))


# ------------------------------------------------------------- criterion 9


def test_criterion_9_defense_evasion(foolsgold_run, krum_run, perdoor_run):
    started = time.time()
    f_runner, f_log, _ = foolsgold_run
    f_inj, f_post = post_injection(f_runner, f_log)
    f_acc = np.array([r["acc_backdoor"] for r in f_post[:100]])
    assert len(f_acc) == 100
    fools_ok = f_acc.mean() >= 0.5

    k_runner, k_log, _ = krum_run
    p_runner, p_log, _ = perdoor_run
    k_inj, k_post = post_injection(k_runner, k_log)
    p_inj, p_post = post_injection(p_runner, p_log)
    assert k_inj == p_inj
    k_accm = np.mean([r["acc_main"] for r in k_post[:200]])
    p_accm = np.mean([r["acc_main"] for r in p_post[:200]])
    krum_ok = k_accm <= p_accm
    ok = fools_ok and krum_ok
    report(9, ok, f"FoolsGold mean Acc_B over 100 rounds {f_acc.mean():.3f} >= 0.5; "
                  f"Krum Acc_M {k_accm:.4f} <= FedAvg Acc_M {p_accm:.4f} at matched rounds",
           started)
    assert ok


# ------------------------------------------------------------ criterion 10


def test_criterion_10_trigger_nonuniformity(perdoor_run):
    started = time.time()
    p_runner, _, out = perdoor_run
    bim_triggers = load_triggers(Path(out) / "triggers")
    assert len(bim_triggers) == 50
    ssd = metrics.trigger_ssd(bim_triggers)
    cross = attack.cross_trigger_set(p_runner.test, p_runner.config.backdoor, count=50)
    cross_ssd = metrics.trigger_ssd(cross)
    ok = (ssd.shape == (1225,) and ssd.var(ddof=1) > 0
          and cross_ssd.shape == (1225,) and not cross_ssd.any())
    report(10, ok, f"50 adversarial triggers: 1225 SSDs, sample variance {ssd.var(ddof=1):.3e} > 0; "
                   f"50 cross triggers: all SSDs zero", started)
    assert ok


# ------------------------------------------------------------ criterion 11


def test_criterion_11_capacity_direction(sweep_prefix_point):
    started = time.time()
    config = desk_config("perdoor", "fedavg")
    rows = sweep_t_delta(config, [1e-2, 1e-3, 1e-4, 1e-5], prefix=sweep_prefix_point)
    counts = [row["backdoor_count"] for row in rows]
    ok = all(a >= b for a, b in zip(counts, counts[1:]))
    took = time.time() - started
    ok = ok and took < 300
    report(11, ok, f"masked-parameter count over t_delta 1e-2..1e-5: {counts} (monotone nonincreasing)", started)
    assert ok


# ------------------------------------------------------------ criterion 12


def short_config(mode, aggregator):
    cfg = desk_config(mode, aggregator, total=40, window_stable=5)
    return replace(cfg, window_volatile=3)


def test_criterion_12_reproducibility(tmp_path):
    started = time.time()
    combos = [("perdoor", "fedavg"), ("baseline-single-shot", "fedavg"),
              ("perdoor", "foolsgold"), ("perdoor", "krum")]
    for i, (mode, aggregator) in enumerate(combos):
        outputs = []
        for threads in (1, 4):
            out = tmp_path / f"{i}_{threads}"
            ExperimentRunner(short_config(mode, aggregator), threads=threads).run(out)
            outputs.append((out / "metrics.csv").read_bytes())
        assert outputs[0] == outputs[1], f"{mode}/{aggregator}: thread count changed the CSV"
    out = tmp_path / "repeat"
    ExperimentRunner(short_config("perdoor", "fedavg"), threads=1).run(out)
    assert (out / "metrics.csv").read_bytes() == (tmp_path / "0_1" / "metrics.csv").read_bytes()
    report(12, True, "criteria 7-9 configurations, shortened to injection + post rounds, produce "
                     "byte-identical CSVs across 1- and 4-thread runs and across repetition",
           started)


# ---------------------------------------------------- supplementary property


def test_variance_separation_property(perdoor_run):
    # masked (backdoor) coordinates stay quieter than the complement in every
    # cumulative post-injection window
    _, _, out = perdoor_run
    from fsbd import checkpoint

    snaps = np.load(Path(out) / "post_injection_snapshots.npy")
    topo = nn.small_cnn()
    bits = checkpoint.load_mask(Path(out) / "backdoor.mask", topo.make_layout())
    series = metrics.param_variance_series(list(snaps), attack.ParamMask(bits))
    assert not series.masked_empty and not series.complement_empty
    assert np.all(series.masked < series.complement)
