import numpy as np
import pytest

from carsa.connectivity import (BlockSummary, DomainMapError, FncMatrix,
                                attention_fnc, block_stats, graph_recovery_score,
                                group_average, pearson_fnc, read_fnc_csv,
                                write_block_csv, write_fnc_csv)
from carsa.data import DomainMap, Sample
from carsa.model import ModelConfig, init_params
from carsa.training import MetricError

TINY = ModelConfig(hidden=3, attn_dim=4, pool_layers=2, fc_hidden=4)


def two_domain_map(m, n_imp):
    return DomainMap(
        domain={i: ("imp" if i < n_imp else "noise") for i in range(m)},
        is_important={i: i < n_imp for i in range(m)},
    )


# ---------------------------------------------------------------------------
# matrix containers
# ---------------------------------------------------------------------------


def test_fnc_matrix_validation():
    with pytest.raises(ValueError, match="square"):
        FncMatrix(np.zeros((2, 3)), "attention")
    with pytest.raises(ValueError, match="kind"):
        FncMatrix(np.zeros((2, 2)), "phase")
    fm = FncMatrix(np.eye(2), "pearson", "s1")
    assert fm.m == 2 and fm.tag == "s1"


# ---------------------------------------------------------------------------
# pearson
# ---------------------------------------------------------------------------


def test_pearson_self_and_anticorrelation():
    x = np.array([0.3, -1.2, 0.8, 2.0, -0.5])
    fm = pearson_fnc(Sample("s", np.stack([x, -x, 2 * x + 1]), 0))
    assert fm.kind == "pearson"
    assert np.allclose(np.diag(fm.values), 1.0, atol=1e-12)
    assert fm.values[0, 1] == pytest.approx(-1.0, abs=1e-12)
    assert fm.values[0, 2] == pytest.approx(1.0, abs=1e-12)  # affine of itself
    assert np.allclose(fm.values, fm.values.T, atol=1e-15)


def test_pearson_known_value():
    fm = pearson_fnc(Sample("s", np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 4.0]]), 0))
    assert fm.values[0, 1] == pytest.approx(0.98198, abs=1e-5)


def test_pearson_affine_invariance():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((4, 30))
    base = pearson_fnc(Sample("s", X, 0)).values
    for _ in range(5):
        a = rng.uniform(0.2, 5.0, size=(4, 1))
        b = rng.standard_normal((4, 1)) * 10
        scaled = pearson_fnc(Sample("s", a * X + b, 0)).values
        assert np.abs(scaled - base).max() < 1e-9


def test_pearson_constant_component_raises():
    X = np.vstack([np.ones(5), np.arange(5.0)])
    with pytest.raises(ValueError, match="component 0"):
        pearson_fnc(Sample("subj9", X, 0))


def test_pearson_values_bounded():
    rng = np.random.default_rng(1)
    for _ in range(10):
        X = rng.standard_normal((5, 8))
        vals = pearson_fnc(Sample("s", X, 0)).values
        assert vals.min() >= -1.0 and vals.max() <= 1.0


# ---------------------------------------------------------------------------
# attention FNC
# ---------------------------------------------------------------------------


def test_attention_fnc_rows_stochastic():
    params = init_params(TINY, np.random.default_rng(2))
    X = np.random.default_rng(3).standard_normal((5, 12))
    fm = attention_fnc(params, TINY, Sample("subj", X, 1))
    assert fm.kind == "attention" and fm.tag == "subj"
    assert fm.values.shape == (5, 5)
    assert np.abs(fm.values.sum(axis=1) - 1.0).max() < 1e-9


def test_attention_fnc_applies_zscore():
    from carsa.data import zscore
    params = init_params(TINY, np.random.default_rng(2))
    X = np.random.default_rng(4).standard_normal((5, 12)) * 3 + 7
    a = attention_fnc(params, TINY, Sample("s", X, 0))
    b = attention_fnc(params, TINY, Sample("s", zscore(X), 0), apply_zscore=False)
    assert np.array_equal(a.values, b.values)


def test_attention_fnc_permutation_equivariance():
    params = init_params(TINY, np.random.default_rng(5))
    X = np.random.default_rng(6).standard_normal((6, 10))
    A = attention_fnc(params, TINY, Sample("s", X, 0)).values
    perm = np.random.default_rng(7).permutation(6)
    Ap = attention_fnc(params, TINY, Sample("s", X[perm], 0)).values
    assert np.abs(Ap - A[np.ix_(perm, perm)]).max() < 1e-9


# ---------------------------------------------------------------------------
# group averaging
# ---------------------------------------------------------------------------


def test_group_average_mean_and_kind():
    a = FncMatrix(np.full((3, 3), 0.2), "attention", "x")
    b = FncMatrix(np.full((3, 3), 0.6), "attention", "y")
    g = group_average([a, b])
    assert g.tag == "group" and g.kind == "attention"
    assert np.allclose(g.values, 0.4, atol=1e-15)


def test_group_average_preserves_row_sums():
    rng = np.random.default_rng(8)
    mats = []
    for _ in range(6):
        raw = rng.uniform(0.1, 1.0, size=(4, 4))
        mats.append(FncMatrix(raw / raw.sum(axis=1, keepdims=True), "attention"))
    g = group_average(mats)
    assert np.abs(g.values.sum(axis=1) - 1.0).max() < 1e-12


def test_group_average_rejects_mixed_input():
    with pytest.raises(ValueError, match="mixed kinds"):
        group_average([FncMatrix(np.eye(2), "attention"),
                       FncMatrix(np.eye(2), "pearson")])
    with pytest.raises(ValueError, match="mixed shapes"):
        group_average([FncMatrix(np.eye(2), "pearson"),
                       FncMatrix(np.eye(3), "pearson")])
    with pytest.raises(ValueError):
        group_average([])


# ---------------------------------------------------------------------------
# block statistics
# ---------------------------------------------------------------------------


def test_block_stats_uniform_matrix():
    m = 6
    fm = FncMatrix(np.full((m, m), 1.0 / m), "attention")
    bs = block_stats(fm, two_domain_map(m, 2))
    for mean in bs.block_means.values():
        assert mean == pytest.approx(1.0 / m, abs=1e-12)
    assert bs.important_mean == pytest.approx(1.0 / m)
    assert bs.noise_mean == pytest.approx(1.0 / m)
    assert bs.cross_mean == pytest.approx(1.0 / m)


def test_block_stats_block_diagonal():
    # 2 imp + 2 noise; imp block 0.4, noise block 0.1, cross 0.25
    A = np.full((4, 4), 0.25)
    A[:2, :2] = 0.4
    A[2:, 2:] = 0.1
    bs = block_stats(FncMatrix(A, "attention"), two_domain_map(4, 2))
    assert bs.important_mean == pytest.approx(0.4)
    assert bs.noise_mean == pytest.approx(0.1)
    assert bs.cross_mean == pytest.approx(0.25)
    assert bs.block_means[("imp", "noise")] == pytest.approx(0.25)
    assert bs.block_counts[("imp", "imp")] == 2  # off-diagonal entries only


def brute_force_block_means(values, dmap):
    m = values.shape[0]
    out = {}
    for src in set(dmap.domain.values()):
        for dst in set(dmap.domain.values()):
            entries = [values[i, j] for i in range(m) for j in range(m)
                       if i != j and dmap.domain[i] == src and dmap.domain[j] == dst]
            if entries:
                out[(src, dst)] = float(np.mean(entries))
    return out


def test_block_stats_matches_brute_force():
    rng = np.random.default_rng(9)
    m = 7
    dmap = DomainMap(
        domain={i: "abc"[i % 3] for i in range(m)},
        is_important={i: i % 3 == 0 for i in range(m)},
    )
    fm = FncMatrix(rng.uniform(0, 1, size=(m, m)), "attention")
    bs = block_stats(fm, dmap)
    expect = brute_force_block_means(fm.values, dmap)
    assert set(bs.block_means) == set(expect)
    for key in expect:
        assert bs.block_means[key] == pytest.approx(expect[key], abs=1e-12)
    # count-weighted means reassemble the global off-diagonal total
    total = sum(bs.block_means[k] * bs.block_counts[k] for k in bs.block_means)
    off = fm.values[~np.eye(m, dtype=bool)].sum()
    assert total == pytest.approx(off, abs=1e-12)


def test_block_stats_unmapped_component():
    fm = FncMatrix(np.eye(3), "attention")
    dmap = DomainMap(domain={0: "a", 1: "a"}, is_important={0: True, 1: False})
    with pytest.raises(DomainMapError, match="component 2"):
        block_stats(fm, dmap)


def test_block_stats_empty_group_is_none():
    fm = FncMatrix(np.full((3, 3), 0.2), "attention")
    dmap = DomainMap(domain={i: "imp" for i in range(3)},
                     is_important={i: True for i in range(3)})
    bs = block_stats(fm, dmap)
    assert bs.noise_mean is None and bs.cross_mean is None
    assert bs.important_mean == pytest.approx(0.2)


# ---------------------------------------------------------------------------
# graph recovery
# ---------------------------------------------------------------------------


def make_truth(m, edges):
    G = np.zeros((m, m))
    for i, j in edges:
        G[i, j] = 0.35
    return G


def test_graph_recovery_perfect_and_chance():
    G = make_truth(4, [(0, 1), (1, 2), (3, 0)])
    A = np.abs(G) + 1e-6  # scores proportional to truth
    assert graph_recovery_score(A, G) == pytest.approx(1.0)
    uniform = np.full((4, 4), 0.25)
    assert graph_recovery_score(uniform, G) == pytest.approx(0.5)


def test_graph_recovery_ignores_diagonal():
    G = np.diag([0.9, 0.9, 0.9])  # self-loops only: no off-diagonal positives
    A = np.random.default_rng(10).uniform(0, 1, (3, 3))
    with pytest.raises(MetricError):
        graph_recovery_score(A, G)


def test_graph_recovery_matches_manual_auc():
    from carsa.training import auc
    rng = np.random.default_rng(11)
    G = make_truth(5, [(0, 1), (2, 3), (4, 0), (1, 2)])
    A = rng.uniform(0, 1, (5, 5))
    pairs = [(A[i, j], int(G[i, j] != 0))
             for i in range(5) for j in range(5) if i != j]
    assert graph_recovery_score(A, G) == pytest.approx(auc(pairs), abs=1e-12)


def test_graph_recovery_accepts_fnc_and_checks_shape():
    G = make_truth(3, [(0, 1)])
    fm = FncMatrix(np.full((3, 3), 1 / 3), "attention")
    assert graph_recovery_score(fm, G) == pytest.approx(0.5)
    with pytest.raises(ValueError, match="shape"):
        graph_recovery_score(np.zeros((3, 3)), np.zeros((4, 4)))


# ---------------------------------------------------------------------------
# CSV round-trips
# ---------------------------------------------------------------------------


def test_fnc_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    vals = rng.standard_normal((5, 5))
    path = tmp_path / "fnc.csv"
    write_fnc_csv(FncMatrix(vals, "pearson", "g"), path)
    back = read_fnc_csv(path, kind="pearson", tag="g")
    assert np.array_equal(back.values, vals)  # 17 significant digits
    assert back.kind == "pearson" and back.tag == "g"
    header = path.read_text().splitlines()[0]
    assert header == "0,1,2,3,4"


def test_fnc_csv_accepts_plain_arrays(tmp_path):
    path = tmp_path / "fnc.csv"
    write_fnc_csv(np.eye(3), path)
    assert np.array_equal(read_fnc_csv(path).values, np.eye(3))


def test_read_fnc_csv_rejects_malformed(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n3,4\n")
    with pytest.raises(ValueError, match="header"):
        read_fnc_csv(path)
    path.write_text("0,1\n1,2\n")
    with pytest.raises(ValueError, match="expected 2x2"):
        read_fnc_csv(path)
    path.write_text("")
    with pytest.raises(ValueError, match="empty"):
        read_fnc_csv(path)


def test_write_block_csv(tmp_path):
    summary = BlockSummary(
        block_means={("b", "a"): 0.5, ("a", "b"): 0.25},
        block_counts={("b", "a"): 2, ("a", "b"): 2},
        important_mean=None, noise_mean=None, cross_mean=None,
    )
    path = tmp_path / "blocks.csv"
    write_block_csv(summary, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "from_domain,to_domain,mean_weight"
    assert lines[1].startswith("a,b,0.25")  # sorted by domain pair
    assert lines[2].startswith("b,a,0.5")
