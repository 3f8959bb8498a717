import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_order_preserving, cider_reference

from gcean.metrics import (
    CiderCorpus,
    Event,
    bleu4,
    cider,
    cider_single,
    corpus_bleu4,
    dvc_eval,
    evaluate,
    order_preserving_match,
    soda,
    tiou,
)


# -- tIoU ------------------------------------------------------------------


def test_tiou_examples():
    assert tiou([10, 20], [10, 20]) == 1.0
    assert tiou([0, 10], [10, 20]) == 0.0
    assert tiou([0, 10], [5, 15]) == pytest.approx(1 / 3, abs=1e-12)


def test_tiou_degenerate():
    with pytest.raises(ValueError):
        tiou([3, 3], [0, 1])


seg = st.tuples(st.floats(0, 100), st.floats(0.01, 50)).map(lambda t: (t[0], t[0] + t[1]))


@settings(max_examples=200, deadline=None)
@given(seg, seg)
def test_tiou_symmetric_bounded(a, b):
    assert tiou(a, b) == tiou(b, a)
    assert 0.0 <= tiou(a, b) <= 1.0
    assert tiou(a, a) == 1.0


# -- BLEU ------------------------------------------------------------------


def test_bleu_identity():
    s = "the cat sat on a mat".split()
    assert bleu4(s, [s]) == 1.0


def test_bleu_hand_example():
    c, r = "a b c d e".split(), "a b c d f".split()
    expected = (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
    assert bleu4(c, [r]) == pytest.approx(expected, abs=1e-6)
    assert expected == pytest.approx(0.668740304976422, abs=1e-12)


def test_bleu_no_overlap_corpus_mode():
    assert corpus_bleu4(["x y z w".split()], [["a b c d".split()]]) == 0.0


def test_bleu_rejects_empty():
    with pytest.raises(ValueError):
        bleu4([], [["a"]])


def test_bleu_brevity_penalty():
    c, r = "a b c d".split(), "a b c d e f".split()
    assert bleu4(c, [r]) == pytest.approx(math.exp(1 - 6 / 4), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(0, 6), min_size=1, max_size=9),
    st.lists(st.lists(st.integers(0, 6), min_size=1, max_size=9), min_size=1, max_size=3),
    st.permutations(list(range(7))),
)
def test_bleu_cider_relabel_invariant(cand, refs, perm):
    relabel = lambda s: [perm[t] for t in s]
    assert bleu4(cand, refs) == pytest.approx(bleu4(relabel(cand), [relabel(r) for r in refs]), abs=1e-12)
    c1 = cider([cand], [refs])
    c2 = cider([relabel(cand)], [[relabel(r) for r in refs]])
    assert c1 == pytest.approx(c2, abs=1e-9)


# -- CIDEr -----------------------------------------------------------------


def test_cider_self_similarity():
    docs = [[["a", "b", "c", "d"]], [["e", "f", "g"]], [["h", "i"]]]
    corpus = CiderCorpus.from_references(docs)
    assert cider_single(["a", "b", "c", "d"], docs[0], corpus) == pytest.approx(10.0, abs=1e-9)


def test_cider_zero_overlap():
    docs = [[["a", "b", "c"]], [["d", "e"]]]
    corpus = CiderCorpus.from_references(docs)
    assert cider_single(["x", "y", "z"], docs[0], corpus) == 0.0


def test_cider_three_doc_oracle():
    docs = [
        [["a", "man", "cuts", "bread"], ["a", "man", "slices", "bread"]],
        [["a", "dog", "runs"]],
        [["the", "man", "cuts", "a", "tomato"]],
    ]
    corpus = CiderCorpus.from_references(docs)
    for cand, refs in [
        (["a", "man", "cuts", "the", "bread"], docs[0]),
        (["a", "dog", "cuts"], docs[1]),
        (["man", "cuts", "a", "tomato"], docs[2]),
    ]:
        assert cider_single(cand, refs, corpus) == pytest.approx(cider_reference(cand, refs, docs), abs=1e-6)


def test_cider_empty_corpus():
    with pytest.raises(ValueError):
        CiderCorpus.from_references([])


# -- dvc_eval --------------------------------------------------------------


def _ev(a, b, toks):
    return Event(a, b, tuple(toks))


def test_dvc_identical():
    gts = [_ev(0, 5, "a b c d e".split()), _ev(6, 9, "f g h i".split())]
    out = dvc_eval(gts, gts)
    assert out["B4"] == pytest.approx(1.0, abs=1e-12)
    for thr in (0.3, 0.5, 0.7, 0.9):
        assert out["per_threshold"][thr]["B4"] == pytest.approx(1.0, abs=1e-12)


def test_dvc_disjoint():
    gts = [_ev(0, 5, "a b c d".split())]
    preds = [_ev(10, 15, "a b c d".split()), _ev(20, 30, "a b c d".split())]
    out = dvc_eval(preds, gts)
    assert out["B4"] == 0.0 and out["C"] == 0.0


def test_dvc_half_credit_example():
    gts = [_ev(0, 5, ["g"])]
    preds = [_ev(0, 5, ["p"]), _ev(20, 25, ["q"])]
    out = dvc_eval(preds, gts, scorers={"B4": lambda c, r: 0.5})
    assert out["B4"] == pytest.approx(0.25, abs=1e-12)


def test_dvc_empty_ground_truth():
    with pytest.raises(ValueError):
        dvc_eval([_ev(0, 1, ["a"])], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.integers(0, 2), st.floats(0, 1))
def test_dvc_monotone(scores, which, bump):
    gts = [_ev(0, 4, [0]), _ev(5, 9, [1]), _ev(10, 14, [2])]
    preds = [_ev(0, 4, [0]), _ev(5.5, 9, [1]), _ev(11, 13, [2])]
    base = dict(enumerate(scores))
    better = dict(base)
    better[which] = max(base[which], bump)
    run = lambda table: dvc_eval(preds, gts, scorers={"S": lambda c, r: table[c[0]]})["S"]
    assert run(better) >= run(base) - 1e-15


# -- SODA ------------------------------------------------------------------


def test_soda_dp_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, m = rng.integers(1, 5, size=2)
        table = rng.random((n, m)) * (rng.random((n, m)) > 0.3)
        total, pairs = order_preserving_match(table)
        assert total == pytest.approx(brute_order_preserving(table), abs=1e-12)
        assert sum(table[i, j] for i, j in pairs) == pytest.approx(total, abs=1e-12)
        assert all(a[0] < b[0] and a[1] < b[1] for a, b in zip(pairs, pairs[1:]))


def test_soda_identity():
    gts = [_ev(0, 3, [1, 2]), _ev(4, 8, [3]), _ev(9, 10, [4, 5])]
    assert soda(gts, gts).score == pytest.approx(1.0, abs=1e-12)


def test_soda_empty_predictions():
    res = soda([], [_ev(0, 1, [1])])
    assert res.score == 0.0 and res.precision == 0.0


def test_soda_unsorted_records_note():
    gts = [_ev(0, 3, [1]), _ev(4, 8, [2])]
    with pytest.warns(UserWarning):
        res = soda(gts[::-1], gts)
    assert res.warnings and res.score == pytest.approx(1.0)


def test_soda_f_measure_hand():
    # one exact hit out of two predictions and one reference
    res = soda([_ev(0, 2, [1]), _ev(5, 6, [1])], [_ev(0, 2, [1])])
    assert res.precision == pytest.approx(0.5)
    assert res.recall == pytest.approx(1.0)
    assert res.score == pytest.approx(2 / 3)


def test_evaluate_report_fields():
    gts = [[_ev(0, 3, [1, 2, 3, 4]), _ev(4, 8, [5, 6, 7, 8])], [_ev(1, 2, [9, 10, 11, 12])]]
    rep = evaluate(gts, gts)
    assert rep.dvc_B4 == pytest.approx(1.0)
    assert rep.SODA_tIoU == pytest.approx(1.0)
    assert rep.dvc_C > 0 and rep.n_videos == 2 and rep.n_references == 3
    d = rep.to_dict()
    assert "METEOR" in d["substitutions"]
