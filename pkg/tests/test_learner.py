import numpy as np
import pytest
import scipy.sparse as sp

from explainrank.corpus import Fact, GoldExplanation, QaInstance, Role, Tablestore
from explainrank.learner import (
    LinearModel,
    PairSet,
    TrainConfig,
    TrainingError,
    assign_rank_targets,
    hinge_objective,
    make_pairs,
    rank_tablestore,
    sample_negatives,
    svr_objective,
    train_pairwise,
    train_pointwise,
    tune,
)
from explainrank.seeding import substream
from explainrank.textproc import process


def _store(n):
    return Tablestore([Fact(f"f{i:02d}", "T", f"fact {i}", process(f"fact {i}")) for i in range(n)])


def _gold(ids):
    return GoldExplanation(tuple((i, Role.CENTRAL) for i in ids))


def test_targets_three_of_five():
    store = _store(5)
    t = assign_rank_targets(_gold(["f03", "f00", "f04"]), store)
    assert [t.target(f) for f in store.ids] == [3, 1, 1, 4, 2]


def test_targets_single_and_twenty_one():
    assert assign_rank_targets(_gold(["f02"]), _store(5)).gold == {"f02": 2}
    store = _store(30)
    t = assign_rank_targets(_gold(store.ids[:21]), store)
    assert t.target("f00") == 22 and t.target("f20") == 2 and t.target("f25") == 1


def test_targets_unresolved():
    with pytest.raises(KeyError):
        assign_rank_targets(_gold(["nope"]), _store(3))


def test_fixture_targets_bijection(store, splits):
    for qa in splits.train + splits.dev:
        t = assign_rank_targets(qa.gold, store, qa.qa_id)
        n = len(qa.gold)
        assert [t.target(f) for f in qa.gold.fact_ids] == list(range(n + 1, 1, -1))
        assert all(t.target(f) == 1 for f in store.ids if f not in qa.gold.fact_ids)


def test_sample_negatives(store, splits):
    qa = splits.train[0]
    neg = sample_negatives(qa, store, 30, seed=5)
    assert len(neg) == len(set(neg)) == 30
    assert not set(neg) & set(qa.gold.fact_ids)
    assert neg == sample_negatives(qa, store, 30, seed=5)
    assert neg != sample_negatives(qa, store, 30, seed=6)
    assert set(sample_negatives(qa, store, 10, seed=5)) <= set(neg)
    everything = sample_negatives(qa, store, len(store) - len(qa.gold), seed=5)
    assert set(everything) == set(store.ids) - set(qa.gold.fact_ids)
    with pytest.raises(ValueError):
        sample_negatives(qa, store, len(store) - len(qa.gold) + 1, seed=5)


def test_make_pairs_four_fact_example():
    p = make_pairs([3, 2, 1, 1], substream(0, "t"))
    got = {tuple(sorted((int(a), int(b)))) for a, b in zip(p.first, p.second)}
    assert got == {(0, 1), (0, 2), (0, 3), (1, 2), (1, 3)}
    t = np.array([3, 2, 1, 1])
    assert np.array_equal(p.labels, np.sign(t[p.first] - t[p.second]))


def test_make_pairs_equal_targets_and_orientation():
    assert len(make_pairs([1, 1, 1], substream(0, "t"))) == 0
    flips = make_pairs(np.r_[np.arange(60, 0, -1)], substream(1, "t"))
    assert set(flips.labels) == {-1.0, 1.0}
    # a pair oriented as (low, high) carries -1
    low_first = flips.first > flips.second
    assert np.all(flips.labels[low_first] == -1)


def test_make_pairs_cap_and_determinism():
    t = np.r_[np.arange(12, 1, -1), np.ones(200)]
    a = make_pairs(t, substream(3, "p"), cap=100)
    b = make_pairs(t, substream(3, "p"), cap=100)
    assert len(a) == 100
    assert np.array_equal(a.first, b.first) and np.array_equal(a.labels, b.labels)


def test_pair_differences():
    X = sp.csr_matrix(np.array([[1.0, 0, 2], [0, 1.0, 2]]))
    p = PairSet(np.array([0]), np.array([1]), np.array([1.0]))
    assert np.array_equal(p.differences(X).toarray(), [[1.0, -1.0, 0.0]])


def _toy_regression(seed=0, n=300, d=8):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    w = rng.normal(size=d)
    return sp.csr_matrix(X), X @ w + 0.5, w


def test_pointwise_small_c_shrinks_to_constant():
    X, y, _ = _toy_regression()
    m = train_pointwise(X, y, TrainConfig(mode="pointwise", C=1e-6, epsilon=0.1))
    assert np.linalg.norm(m.w) < 1e-2
    pred = m.decision(X)
    assert pred.max() - pred.min() < 0.05


def test_pointwise_history_non_increasing():
    X, y, _ = _toy_regression(1)
    m = train_pointwise(X, y, TrainConfig(mode="pointwise", C=1.0, epsilon=0.1, max_epochs=50, tol=1e-9))
    h = np.asarray(m.history)
    assert np.all(h[1:] <= h[:-1] * (1 + 1e-6))
    assert m.history[-1] == pytest.approx(svr_objective(m.w, m.b, X, y, 1.0, 0.1, bias_penalty=1.0))


def test_pointwise_rejects_non_finite_targets():
    X, y, _ = _toy_regression()
    y[3] = np.nan
    with pytest.raises(TrainingError):
        train_pointwise(X, y, TrainConfig(mode="pointwise"))


def test_pointwise_deterministic():
    X, y, _ = _toy_regression(2)
    cfg = TrainConfig(mode="pointwise", C=1.0, max_epochs=20)
    assert train_pointwise(X, y, cfg).to_bytes() == train_pointwise(X, y, cfg).to_bytes()


def test_pairwise_single_pair_large_c():
    X = sp.csr_matrix(np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 1.0]]))
    p = PairSet(np.array([0]), np.array([1]), np.array([1.0]))
    m = train_pairwise(X, p, TrainConfig(mode="pairwise", C=1e3, tol=1e-9, max_epochs=50))
    d = p.differences(X).toarray()[0]
    assert m.w @ d >= 1 - 1e-3
    assert m.b == 0.0


def _toy_pairs(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(80, 6))
    scores = X @ rng.normal(size=6)
    sets = []
    for q in range(4):
        t = np.argsort(np.argsort(scores[q * 20 : (q + 1) * 20])).astype(float)
        sets.append(make_pairs(t, substream(seed, f"q{q}"), cap=60).shifted(q * 20))
    return sp.csr_matrix(X), PairSet.concat(sets)


def test_pairwise_antisymmetry():
    X, p = _toy_pairs()
    cfg = TrainConfig(mode="pairwise", C=0.5, max_epochs=40)
    a = train_pairwise(X, p, cfg)
    b = train_pairwise(X, p.flipped(), cfg)
    assert np.allclose(a.w, b.w, atol=1e-10)
    D = p.differences(X)
    assert hinge_objective(a.w, D, p.labels, 0.5) == pytest.approx(
        hinge_objective(a.w, -D, -p.labels, 0.5), abs=1e-12
    )


def test_pairwise_history_non_increasing():
    X, p = _toy_pairs(1)
    m = train_pairwise(X, p, TrainConfig(mode="pairwise", C=1.0, max_epochs=60, tol=1e-9))
    h = np.asarray(m.history)
    assert np.all(h[1:] <= h[:-1] * (1 + 1e-6))


def test_mode_mismatch():
    X, y, _ = _toy_regression()
    with pytest.raises(ValueError):
        train_pointwise(X, y, TrainConfig(mode="pairwise"))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(C=0)
    with pytest.raises(ValueError):
        TrainConfig(epsilon=-1)
    with pytest.raises(ValueError):
        TrainConfig(mode="listwise")
    assert TrainConfig().digest() == TrainConfig().digest() != TrainConfig(C=1.0).digest()


def test_rank_tablestore_ties_and_single_weight():
    ids = ["c", "a", "b", "d"]
    X = sp.csr_matrix(np.array([[0, 0], [0, 0], [0, 1.0], [0, 0]]))
    zero = LinearModel(np.zeros(2))
    assert rank_tablestore(zero, "q", X, ids).fact_ids == ("a", "b", "c", "d")
    one = LinearModel(np.array([0.0, 2.0]))
    r = rank_tablestore(one, "q", X, ids)
    assert r.fact_ids[0] == "b" and sorted(r.fact_ids) == sorted(ids)
    with pytest.raises(ValueError):
        rank_tablestore(LinearModel(np.zeros(3)), "q", X, ids)


def test_rank_scaling_invariance():
    rng = np.random.default_rng(4)
    X = sp.csr_matrix(rng.integers(0, 2, size=(40, 10)).astype(float))
    ids = [f"f{i:02d}" for i in range(40)]
    m = LinearModel(rng.normal(size=10), 0.3)
    base = rank_tablestore(m, "q", X, ids).fact_ids
    for lam in (0.01, 3.0, 1e4):
        assert rank_tablestore(LinearModel(m.w * lam, m.b * lam), "q", X, ids).fact_ids == base


def test_model_file_round_trip(tmp_path):
    m = LinearModel(np.array([1.5, -2.0, 0.0]), 0.25, "pairwise", "abc")
    m.save(tmp_path / "m.bin")
    back = LinearModel.load(tmp_path / "m.bin")
    assert back == m
    data = (tmp_path / "m.bin").read_bytes()
    with pytest.raises(ValueError, match="magic"):
        LinearModel.from_bytes(b"NOPE" + data[4:])
    with pytest.raises(ValueError, match="length"):
        LinearModel.from_bytes(data[:-8])
    with pytest.raises(TrainingError):
        LinearModel(np.array([np.inf]))


def test_tune_single_point_and_ties():
    r = tune([0.5], [100], lambda c, n: 0.4)
    assert (r.best_C, r.best_n_neg, r.best_score) == (0.5, 100, 0.4)
    r = tune([1.0, 0.1], [600, 500], lambda c, n: 0.7)
    assert (r.best_C, r.best_n_neg) == (0.1, 500)
    r = tune([0.1, 1.0], [500], lambda c, n: c)
    assert r.best_C == 1.0 and len(r.table) == 2
    with pytest.raises(ValueError):
        tune([], [500], lambda c, n: 0.0)


def test_tune_degenerate_c_on_fixture(store, splits):
    from explainrank.features import FeatureConfig
    from explainrank.pipeline import Experiment

    exp = Experiment(store, splits, FeatureConfig(groups=("lex", "mh")), seed=3)
    prov = exp.providers()
    data = exp.training_set(10, prov)
    models = {c: exp.fit(data, TrainConfig(mode="pointwise", C=c, n_neg=10, max_epochs=30)) for c in (0.05, 1e9)}
    scores = dict(zip(models, exp.evaluate_models(list(models.values()), data.space, prov)))
    result = tune(list(models), [10], lambda c, n: scores[c])
    assert all(np.isfinite(s) for _, _, s in result.table)
