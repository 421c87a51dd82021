"""Release acceptance gate.

Seven end-to-end checks covering gradient correctness, architecture
arithmetic, structural invariants, synthetic classification power (with a
no-signal negative control), connectivity recovery, oracle equivalences, and
protocol bookkeeping.  Each test prints a single PASS/FAIL verdict line that
stays visible under pytest's output capture, then asserts the same condition.

The classification experiment (a 4-fold x 3-seed training protocol on the
planted-graph synthetic benchmark, plus a beta=0 control) runs once in a
module-scoped fixture and takes several minutes; everything else is fast.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from carsa import adcore, cli, data, model, training
from carsa.connectivity import (block_stats, graph_recovery_score,
                                group_average, pearson_fnc, read_fnc_csv)
from carsa.data import Sample, SyntheticSpec
from carsa.model import ModelConfig
from carsa.training import TrainConfig

# Configuration for the synthetic classification experiment.  The model is a
# slimmed-down instance of the default architecture (same topology, smaller
# widths) so the 24-trial protocol fits the single-core runtime budget.
EXPERIMENT_MODEL = ModelConfig(hidden=8, attn_dim=16, pool_layers=3, fc_hidden=16)
EXPERIMENT_TRAIN = TrainConfig(master_seed=7, trials=3)
EXPERIMENT_FOLDS = 4


def verdict(capsys, ok: bool, label: str, detail: str) -> None:
    line = f"[acceptance {label}] {'PASS' if ok else 'FAIL'} ({detail})"
    with capsys.disabled():
        print(line, flush=True)


# ---------------------------------------------------------------------------
# 1. Gradient correctness
# ---------------------------------------------------------------------------


def test_1_gradient_correctness(capsys):
    t0 = time.perf_counter()
    per_op = adcore.standard_op_checks(n_points=10, seed=0)
    worst_op = max(per_op.values())
    end_to_end = model.model_gradcheck(n_points=10, seed=0)  # toy model m=3 T=8
    elapsed = time.perf_counter() - t0
    ok = worst_op <= 1e-4 and end_to_end <= 1e-4 and elapsed < 30.0
    verdict(capsys, ok, "1/7 gradient correctness",
            f"per-op {worst_op:.2e}, end-to-end {end_to_end:.2e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. Architecture arithmetic
# ---------------------------------------------------------------------------


def test_2_architecture_arithmetic(capsys):
    cfg = ModelConfig()
    schedule = model.pool_schedule(100, cfg)

    h, d, fc = 64, 64, 64
    expected = {}
    for direction in ("fw", "bw"):
        for gate in "ifgo":
            expected[f"lstm_{direction}_W{gate}"] = (1, h)
            expected[f"lstm_{direction}_U{gate}"] = (h, h)
            expected[f"lstm_{direction}_b{gate}"] = (1, h)
    for name in "QKV":
        expected[f"att_W{name}"] = (2 * h, d)
    for layer in (1, 2, 3):
        expected[f"pool_p{layer}"] = (d, 1)
    expected.update({"fc_W1": (d, fc), "fc_b1": (1, fc),
                     "fc_W2": (fc, 2), "fc_b2": (1, 2)})

    shapes_ok = model.param_shapes(cfg) == expected
    ok = schedule == [80, 64, 51] and shapes_ok
    verdict(capsys, ok, "2/7 architecture arithmetic",
            f"pool schedule 100->{'->'.join(map(str, schedule))}, "
            f"default shapes {'match' if shapes_ok else 'MISMATCH'}")
    assert ok


# ---------------------------------------------------------------------------
# 3. Structural invariants, 50 randomized instances each
# ---------------------------------------------------------------------------

INVARIANT_CFG = ModelConfig(hidden=3, attn_dim=4, pool_layers=2, fc_hidden=5)
INVARIANT_M, INVARIANT_T = 8, 12


def tie_free_instance(rng):
    """Random (params, X) whose pooling scores sit away from selection ties.

    Unit-normal parameters (not the small training init) give the attention
    and pooling stages real contrast, so selection margins are generically
    wide and the invariants are exercised across a large dynamic range.
    """
    ks = model.pool_schedule(INVARIANT_M, INVARIANT_CFG)
    shapes = model.param_shapes(INVARIANT_CFG)
    for _ in range(100):
        params = model.ModelParams({name: rng.standard_normal(shape)
                                    for name, shape in shapes.items()})
        X = rng.standard_normal((INVARIANT_M, INVARIANT_T))
        trace = model.forward(X, params, INVARIANT_CFG)
        if model._boundary_gap(trace, ks) > 1e-4:
            return params, X, trace
    raise AssertionError("no tie-free instance found")


def test_3_structural_invariants(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst_row = worst_perm = worst_pearson = 0.0
    for _ in range(50):
        params, X, trace = tie_free_instance(rng)

        worst_row = max(worst_row,
                        float(np.abs(trace.attention.sum(axis=1) - 1.0).max()))

        perm = rng.permutation(INVARIANT_M)
        permuted = model.forward(X[perm], params, INVARIANT_CFG)
        worst_perm = max(worst_perm,
                         float(np.abs(permuted.logits - trace.logits).max()))

        for outer, inner in zip(trace.kept, trace.kept[1:]):
            assert set(inner) <= set(outer), "kept indices not nested"

        rerun = model.forward(X, params, INVARIANT_CFG)
        assert np.array_equal(rerun.logits, trace.logits)
        assert np.array_equal(rerun.attention, trace.attention)
        assert [list(k) for k in rerun.kept] == [list(k) for k in trace.kept]

        scale = rng.uniform(0.5, 2.0, size=(INVARIANT_M, 1))
        shift = rng.standard_normal((INVARIANT_M, 1))
        base = pearson_fnc(Sample("a", X, 0)).values
        affine = pearson_fnc(Sample("b", scale * X + shift, 0)).values
        worst_pearson = max(worst_pearson, float(np.abs(base - affine).max()))

    elapsed = time.perf_counter() - t0
    ok = (worst_row <= 1e-9 and worst_perm <= 1e-9 and worst_pearson <= 1e-9
          and elapsed < 120.0)
    verdict(capsys, ok, "3/7 structural invariants",
            f"row-sum {worst_row:.1e}, permutation {worst_perm:.1e}, "
            f"pearson-affine {worst_pearson:.1e}, nesting+determinism exact, "
            f"{elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 4 & 5. Synthetic classification and connectivity recovery
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def classification_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_runs")
    spec = SyntheticSpec(seed=7)

    t0 = time.perf_counter()
    dataset, (g0, g1) = data.gen_synthetic(spec)
    plan = data.make_folds(dataset, master_seed=EXPERIMENT_TRAIN.master_seed,
                           n_folds=EXPERIMENT_FOLDS,
                           n_trials=EXPERIMENT_TRAIN.trials)
    pos_dir = root / "positive"
    pos_dir.mkdir()
    reports, failures = training.run_protocol(dataset, plan, EXPERIMENT_MODEL,
                                              EXPERIMENT_TRAIN, pos_dir)
    positive_seconds = time.perf_counter() - t0

    t1 = time.perf_counter()
    null_ds, _ = data.gen_synthetic(dataclasses.replace(spec, beta=0.0))
    null_plan = data.make_folds(null_ds, master_seed=EXPERIMENT_TRAIN.master_seed,
                                n_folds=EXPERIMENT_FOLDS,
                                n_trials=EXPERIMENT_TRAIN.trials)
    ctl_dir = root / "control"
    ctl_dir.mkdir()
    null_reports, null_failures = training.run_protocol(
        null_ds, null_plan, EXPERIMENT_MODEL, EXPERIMENT_TRAIN, ctl_dir)
    control_seconds = time.perf_counter() - t1

    return {
        "dataset": dataset, "g0": g0, "g1": g1,
        "reports": reports, "failures": failures,
        "positive_seconds": positive_seconds,
        "null_reports": null_reports, "null_failures": null_failures,
        "control_seconds": control_seconds,
    }


def test_4_synthetic_classification(capsys, classification_runs):
    runs = classification_runs
    n_expected = EXPERIMENT_FOLDS * EXPERIMENT_TRAIN.trials
    agg = training.summarize(runs["reports"])
    null_agg = training.summarize(runs["null_reports"])
    losses_improve = all(r.train_losses[-1] < r.train_losses[0]
                         for r in runs["reports"])

    ok = (not runs["failures"] and len(runs["reports"]) == n_expected
          and agg["auc_mean"] >= 0.90 and agg["accuracy_mean"] >= 0.80
          and runs["positive_seconds"] < 1200.0
          and not runs["null_failures"]
          and 0.35 <= null_agg["auc_mean"] <= 0.65
          and losses_improve)
    verdict(capsys, ok, "4/7 synthetic classification",
            f"mean AUC {agg['auc_mean']:.3f}, mean acc {agg['accuracy_mean']:.3f} "
            f"in {runs['positive_seconds']:.0f}s; beta=0 control AUC "
            f"{null_agg['auc_mean']:.3f} in {runs['control_seconds']:.0f}s")
    assert ok


def test_5_connectivity_recovery(capsys, classification_runs):
    runs = classification_runs
    matrices = [read_fnc_csv(r.attention_path) for r in runs["reports"]]
    pooled = group_average(matrices)
    blocks = block_stats(pooled, runs["dataset"].domain_map)
    ratio = blocks.important_mean / blocks.noise_mean
    score0 = graph_recovery_score(pooled, runs["g0"])
    score1 = graph_recovery_score(pooled, runs["g1"])

    ok = ratio >= 1.5 and score0 >= 0.7 and score1 >= 0.7
    verdict(capsys, ok, "5/7 connectivity recovery",
            f"important/noise block ratio {ratio:.2f}, "
            f"edge recovery AUC class0 {score0:.3f} class1 {score1:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 6. Oracle equivalences
# ---------------------------------------------------------------------------


def pairwise_auc(labels, scores):
    """AUC as an explicit count over positive/negative pairs."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0
               for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def attention_oracle(Y, WQ, WK, WV):
    m, d = Y.shape[0], WQ.shape[1]
    Q, K, V = Y @ WQ, Y @ WK, Y @ WV
    A = np.zeros((m, m))
    for i in range(m):
        logits = [sum(Q[i, a] * K[j, a] for a in range(d)) / math.sqrt(d)
                  for j in range(m)]
        top = max(logits)
        exps = [math.exp(v - top) for v in logits]
        total = sum(exps)
        for j in range(m):
            A[i, j] = exps[j] / total
    return A, A @ V


def scalar_lstm_step(x, h_prev, c_prev, arrs, direction):
    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    n = len(h_prev)
    out_h, out_c = [], []
    for k in range(n):
        pre = {}
        for gate in ("i", "f", "g", "o"):
            acc = (x * arrs[f"lstm_{direction}_W{gate}"][0][k]
                   + arrs[f"lstm_{direction}_b{gate}"][0][k])
            for j in range(n):
                acc += h_prev[j] * arrs[f"lstm_{direction}_U{gate}"][j][k]
            pre[gate] = acc
        i, f, o = sig(pre["i"]), sig(pre["f"]), sig(pre["o"])
        g = math.tanh(pre["g"])
        c = f * c_prev[k] + i * g
        out_c.append(c)
        out_h.append(o * math.tanh(c))
    return np.array(out_h), np.array(out_c)


def test_6_oracle_equivalences(capsys):
    rng = np.random.default_rng(23)

    worst_auc = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 21))
        labels = np.zeros(n, dtype=int)
        labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
        scores = np.round(rng.standard_normal(n), int(rng.integers(0, 3)))
        scored = list(zip(scores.tolist(), labels.tolist()))
        worst_auc = max(worst_auc, abs(training.auc(scored)
                                       - pairwise_auc(labels, scores)))

    cfg = ModelConfig(hidden=3, attn_dim=5, pool_layers=2, fc_hidden=4)
    worst_att = 0.0
    for _ in range(50):
        params = model.init_params(cfg, rng)
        Y = rng.standard_normal((int(rng.integers(2, 9)), 2 * cfg.hidden)) * 2.0
        Z, A = model.self_attention(Y, params)
        A2, Z2 = attention_oracle(Y, params.arrays["att_WQ"],
                                  params.arrays["att_WK"],
                                  params.arrays["att_WV"])
        worst_att = max(worst_att, float(np.abs(A - A2).max()),
                        float(np.abs(Z - Z2).max()))

    worst_lstm = 0.0
    for _ in range(10):
        params = model.init_params(cfg, rng)
        for arr in params.arrays.values():
            arr += rng.standard_normal(arr.shape) * 0.2
        x = float(rng.standard_normal())
        h_prev = rng.standard_normal(cfg.hidden)
        c_prev = rng.standard_normal(cfg.hidden)
        for direction in ("fw", "bw"):
            h, c = model.lstm_cell(x, h_prev, c_prev, params, direction)
            h2, c2 = scalar_lstm_step(x, h_prev, c_prev, params.arrays, direction)
            worst_lstm = max(worst_lstm, float(np.abs(h - h2).max()),
                             float(np.abs(c - c2).max()))

    ok = worst_auc <= 1e-12 and worst_att <= 1e-12 and worst_lstm <= 1e-12
    verdict(capsys, ok, "6/7 oracle equivalences",
            f"auc {worst_auc:.1e} (200 cases), attention {worst_att:.1e} "
            f"(50 cases), lstm {worst_lstm:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 7. Protocol bookkeeping
# ---------------------------------------------------------------------------


def test_7_protocol_bookkeeping(capsys, tmp_path):
    samples = [Sample(f"s{i:03d}", np.zeros((4, 6)), i % 2) for i in range(311)]
    dataset = data.Dataset(samples, m=4, T=6)
    plan = data.make_folds(dataset, master_seed=0)
    sizes = sorted(len(plan.fold_ids(f)) for f in range(plan.n_folds))
    sizes_ok = sizes == [77, 78, 78, 78]

    ds_dir = tmp_path / "ds"
    assert cli.main(["gen", "--out", str(ds_dir), "--subjects-per-class", "6",
                     "--components", "6", "--important", "3",
                     "--timesteps", "16", "--seed", "3"]) == 0
    run_dir = tmp_path / "run"
    code = cli.main(["train", "--data", str(ds_dir / "manifest.csv"),
                     "--out", str(run_dir), "--epochs", "1",
                     "--batch-size", "8", "--hidden", "3", "--attn-dim", "4",
                     "--pool-layers", "2", "--fc-hidden", "4"])
    rows = (run_dir / "summary.csv").read_text().strip().splitlines()
    trial_dirs = list((run_dir / "trials").iterdir())
    rows_ok = code == 0 and len(rows) == 1 + 40 and len(trial_dirs) == 40

    ok = sizes_ok and rows_ok
    verdict(capsys, ok, "7/7 protocol bookkeeping",
            f"311-subject fold sizes {sizes}, default protocol wrote "
            f"{len(rows) - 1} trial reports")
    assert ok
