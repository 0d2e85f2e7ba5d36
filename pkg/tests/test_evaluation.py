import math

import numpy as np
import pytest
from scipy import integrate

from explainrank.corpus import GoldExplanation, QaInstance, Role
from explainrank.evaluation import (
    K_GRID,
    AblationRow,
    EvalReport,
    ablation_csv,
    ablation_run,
    average_precision,
    evaluate,
    map_by_length,
    mean_ap,
    paired_t_test,
    pr_at_k_exact,
    pr_at_k_set,
)
from explainrank.ranking import RankedExplanation

IDS = [f"f{i}" for i in range(10)]


def test_ap_examples():
    assert average_precision(IDS, ["f0", "f2"]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)
    assert average_precision(IDS, ["f0", "f1", "f2"]) == 1.0
    assert average_precision(IDS, ["f9"]) == pytest.approx(1 / 10)
    with pytest.raises(ValueError):
        average_precision(IDS, [])


def test_mean_ap():
    assert mean_ap([1.0, 0.5]) == 0.75
    assert mean_ap([0.3]) == 0.3
    assert mean_ap([0.37] * 7) == pytest.approx(0.37, abs=1e-15)
    with pytest.raises(ValueError):
        mean_ap([])


def test_pr_exact_examples():
    assert pr_at_k_exact(["a", "b", "x", "y"], ["a", "b", "c", "d"], 2) == (1.0, 0.5)
    assert pr_at_k_exact(["b", "a", "x"], ["a", "b"], 2) == (0.0, 0.0)
    assert pr_at_k_exact(["a", "x", "y"], ["a"], 2) == (0.5, 1.0)
    with pytest.raises(ValueError):
        pr_at_k_exact(["a"], ["a"], 0)


def test_pr_set_examples():
    assert pr_at_k_set(["b", "a", "x"], ["a", "b"], 2) == (1.0, 1.0)
    assert pr_at_k_set(["x", "y", "a"], ["a"], 2) == (0.0, 0.0)


def test_t_test_degenerate():
    with pytest.raises(ValueError, match="zero variance"):
        paired_t_test([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])
    t, p = paired_t_test(np.full(5, 0.6), np.full(5, 0.5))
    assert t == math.inf and p < 1e-9
    with pytest.raises(ValueError):
        paired_t_test([0.1], [0.2])


def _t_pdf(x, df):
    return math.exp(
        math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
        - (df + 1) / 2 * math.log1p(x * x / df)
    )


@pytest.mark.parametrize("seed", range(5))
def test_t_test_matches_integrated_pdf(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 40))
    a = rng.uniform(size=n)
    b = a - rng.normal(0.05, 0.2, size=n)
    t, p = paired_t_test(a, b)
    d = a - b
    assert t == pytest.approx(d.mean() / (d.std(ddof=1) / math.sqrt(n)))
    tail, _ = integrate.quad(_t_pdf, abs(t), np.inf, args=(n - 1,), epsabs=1e-13, epsrel=1e-12)
    assert p == pytest.approx(2 * tail, abs=1e-6)


def _qa(qa_id, gold):
    return QaInstance(qa_id, "q", "a", gold=GoldExplanation(tuple((g, Role.CENTRAL) for g in gold)))


def test_evaluate_and_round_trip():
    instances = [_qa("q1", ["f0", "f2"]), _qa("q2", ["f1"]), QaInstance("q3", "q", "a")]
    rankings = {
        "q1": RankedExplanation("q1", tuple(IDS), tuple(range(10, 0, -1))),
        "q2": RankedExplanation("q2", tuple(IDS), tuple(range(10, 0, -1))),
    }
    rep = evaluate(rankings, instances)
    assert rep.ap == pytest.approx({"q1": (1 + 2 / 3) / 2, "q2": 0.5})
    assert rep.map == pytest.approx(((1 + 2 / 3) / 2 + 0.5) / 2)
    assert set(rep.exact_precision) == set(K_GRID)
    assert rep.exact_recall[2] == pytest.approx(0.25)  # q1 hits f0 at 1; q2 misses
    assert rep.set_recall[2] == pytest.approx(0.75)
    assert rep.map_by_length == pytest.approx({1: 0.5, 2: (1 + 2 / 3) / 2})
    assert EvalReport.from_json(rep.to_json()) == rep
    assert rep.curves_csv().splitlines()[0] == "k,exact_precision,exact_recall,set_precision,set_recall"
    with pytest.raises(KeyError):
        evaluate({"q1": rankings["q1"]}, instances)


def test_map_by_length_buckets():
    aps = {"a": 0.2, "b": 0.4, "c": 0.9}
    assert map_by_length(aps, {"a": 3, "b": 3, "c": 3}) == pytest.approx({3: mean_ap(aps.values())})
    assert map_by_length({"a": 0.5, "b": 0.5}, {"a": 2, "b": 7}) == {2: 0.5, 7: 0.5}


def test_ablation_base_only_and_addons():
    seen = []

    def run(groups, learner):
        seen.append((groups, learner))
        return 0.1 * len(groups), None

    rows = ablation_run(["lex"], [], ["svr", "ltr"], run)
    assert [r.groups for r in rows] == [("lex",), ("lex",)]
    rows = ablation_run(["lex"], ["tfr", "emb"], ["svr"], run)
    assert [r.label for r in rows] == ["lex", "lex+tfr", "lex+emb"]
    assert ablation_csv(rows).splitlines()[1] == "lex,svr,0.100000,"
    assert AblationRow(("lex",), "svr", 0.5, 0.25).label == "lex"
