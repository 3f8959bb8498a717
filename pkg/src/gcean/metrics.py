"""Dense-captioning evaluation: tIoU, BLEU-4, CIDEr(-D), dvc_eval and SODA.

Captions are sequences of hashable tokens (vocabulary ids). Everything here
is deterministic and free of global state.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

Tokens = Sequence[Hashable]
DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7, 0.9)


def tiou(a: Sequence[float], b: Sequence[float]) -> float:
    a0, a1 = float(a[0]), float(a[1])
    b0, b1 = float(b[0]), float(b[1])
    if not (a0 < a1 and b0 < b1):
        raise ValueError(f"degenerate segment: {a} / {b}")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0) - max(0.0, max(a0, b0) - min(a1, b1))
    return inter / union


def _ngrams(tokens: Tokens, n: int) -> Counter:
    tokens = tuple(tokens)
    return Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def _bleu_stats(candidate: Tokens, references: Sequence[Tokens], max_n: int = 4):
    matches, totals = [], []
    for n in range(1, max_n + 1):
        cand = _ngrams(candidate, n)
        max_ref = Counter()
        for ref in references:
            for g, c in _ngrams(ref, n).items():
                max_ref[g] = max(max_ref[g], c)
        matches.append(sum(min(c, max_ref[g]) for g, c in cand.items()))
        totals.append(max(len(candidate) - n + 1, 0))
    c_len = len(candidate)
    # closest reference length, shorter wins ties
    r_len = min((abs(len(r) - c_len), len(r)) for r in references)[1]
    return matches, totals, c_len, r_len


def _bleu_from_stats(matches, totals, c_len, r_len, smooth: bool) -> float:
    log_p = 0.0
    for m, t in zip(matches, totals):
        if m == 0:
            if not smooth:
                return 0.0
            m, t = m + 1, t + 1
        log_p += math.log(m / t)
    log_p /= len(matches)
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / max(c_len, 1))
    return bp * math.exp(log_p)


def bleu4(candidate: Tokens, references: Sequence[Tokens], smooth: bool = True) -> float:
    """Sentence BLEU-4 with add-one smoothing applied only to zero precisions."""
    if not candidate or not references or not all(references):
        raise ValueError("BLEU needs a non-empty candidate and non-empty references")
    return _bleu_from_stats(*_bleu_stats(candidate, references), smooth=smooth)


def corpus_bleu4(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> float:
    """Unsmoothed corpus BLEU-4 (counts pooled over all candidates)."""
    if not candidates or len(candidates) != len(references):
        raise ValueError("need one reference list per candidate")
    M, T, cl, rl = [0] * 4, [0] * 4, 0, 0
    for cand, refs in zip(candidates, references):
        m, t, c, r = _bleu_stats(cand, refs)
        M = [a + b for a, b in zip(M, m)]
        T = [a + b for a, b in zip(T, t)]
        cl += c
        rl += r
    return _bleu_from_stats(M, T, cl, rl, smooth=False)


# ---------------------------------------------------------------------------
# CIDEr


@dataclass
class CiderCorpus:
    """Document frequencies of n-grams over a reference corpus.

    Each document is the reference set of one item; an n-gram counts once
    per document.
    """

    df: Counter
    n_docs: int
    n: int = 4

    @classmethod
    def from_references(cls, references: Sequence[Sequence[Tokens]], n: int = 4) -> "CiderCorpus":
        if not references:
            raise ValueError("empty reference corpus")
        df = Counter()
        for refs in references:
            grams = set()
            for ref in refs:
                for k in range(1, n + 1):
                    grams.update(_ngrams(ref, k))
            df.update(grams)
        return cls(df, len(references), n)

    def vector(self, tokens: Tokens):
        vecs, norms = [], []
        log_n = math.log(float(self.n_docs))
        for k in range(1, self.n + 1):
            counts = _ngrams(tokens, k)
            vec = {g: c * (log_n - math.log(max(1.0, self.df.get(g, 0.0)))) for g, c in counts.items()}
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms


def _cider_sim(vc, nc, lc, vr, nr, lr, sigma, clip, n):
    delta = float(lc - lr)
    out = np.zeros(n)
    for k in range(n):
        val = 0.0
        for g, x in vc[k].items():
            if g in vr[k]:
                y = vr[k][g]
                val += (min(x, y) if clip else x) * y
        if nc[k] != 0 and nr[k] != 0:
            val /= nc[k] * nr[k]
        else:
            val = 0.0
        if sigma is not None:
            val *= math.exp(-(delta ** 2) / (2 * sigma ** 2))
        out[k] = val
    return out


def cider_single(
    candidate: Tokens,
    references: Sequence[Tokens],
    corpus: CiderCorpus,
    variant_d: bool = True,
    scale: float = 10.0,
    sigma: float = 6.0,
) -> float:
    vc, nc = corpus.vector(candidate)
    acc = np.zeros(corpus.n)
    for ref in references:
        vr, nr = corpus.vector(ref)
        acc += _cider_sim(vc, nc, len(candidate), vr, nr, len(ref),
                          sigma if variant_d else None, variant_d, corpus.n)
    score = acc.mean() / len(references)
    return float(score * scale)


def cider(
    candidates: Sequence[Tokens],
    references: Sequence[Sequence[Tokens]],
    corpus: CiderCorpus | None = None,
    variant_d: bool = True,
    scale: float = 10.0,
) -> float:
    """Mean CIDEr over items; document frequencies default to ``references``."""
    if not candidates or len(candidates) != len(references):
        raise ValueError("need one reference list per candidate")
    corpus = corpus or CiderCorpus.from_references(references)
    return float(np.mean([cider_single(c, r, corpus, variant_d, scale) for c, r in zip(candidates, references)]))


# ---------------------------------------------------------------------------
# Event-level protocols


@dataclass(frozen=True)
class Event:
    t_start: float
    t_end: float
    tokens: tuple

    @classmethod
    def coerce(cls, ev) -> "Event":
        if isinstance(ev, Event):
            return ev
        if isinstance(ev, dict):
            return cls(float(ev["t_start"]), float(ev["t_end"]), tuple(ev["tokens"]))
        return cls(float(ev.t_start), float(ev.t_end), tuple(ev.tokens))

    @property
    def segment(self) -> tuple[float, float]:
        return self.t_start, self.t_end


CaptionScorer = Callable[[Tokens, Tokens], float]


def bleu_scorer(candidate: Tokens, reference: Tokens) -> float:
    return bleu4(candidate, [reference])


def make_cider_scorer(corpus: CiderCorpus, **kw) -> CaptionScorer:
    def score(candidate: Tokens, reference: Tokens) -> float:
        return cider_single(candidate, [reference], corpus, **kw)
    return score


def dvc_eval(
    preds: Sequence,
    gts: Sequence,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    scorers: dict[str, CaptionScorer] | None = None,
) -> dict:
    """Threshold-averaged caption scores.

    At each threshold a prediction is scored against its highest-tIoU ground
    truth at or above the threshold (lowest index on ties); predictions with
    no such ground truth score 0. Several predictions may share one ground
    truth. Returns ``{metric: mean over thresholds, "per_threshold": {...}}``.
    """
    gts = [Event.coerce(g) for g in gts]
    preds = [Event.coerce(p) for p in preds]
    if not gts:
        raise ValueError("dvc_eval needs at least one ground-truth event")
    if scorers is None:
        corpus = CiderCorpus.from_references([[g.tokens] for g in gts])
        scorers = {"B4": bleu_scorer, "C": make_cider_scorer(corpus)}
    ious = np.array([[tiou(p.segment, g.segment) for g in gts] for p in preds]).reshape(len(preds), len(gts))
    per_threshold = {}
    for thr in thresholds:
        sums = dict.fromkeys(scorers, 0.0)
        for i, p in enumerate(preds):
            row = ious[i]
            j = int(np.argmax(row))
            if row[j] < thr:
                continue
            for name, fn in scorers.items():
                sums[name] += fn(p.tokens, gts[j].tokens)
        n = max(len(preds), 1)
        per_threshold[thr] = {name: s / n for name, s in sums.items()}
    result = {name: float(np.mean([per_threshold[t][name] for t in thresholds])) for name in scorers}
    result["per_threshold"] = per_threshold
    return result


def order_preserving_match(score: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    """Maximum-weight one-to-one matching that preserves order on both sides."""
    score = np.asarray(score, dtype=float)
    n, m = score.shape
    dp = np.zeros((n + 1, m + 1))
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            dp[i, j] = max(dp[i - 1, j], dp[i, j - 1], dp[i - 1, j - 1] + score[i - 1, j - 1])
    pairs = []
    i, j = n, m
    while i > 0 and j > 0:
        if dp[i, j] == dp[i - 1, j]:
            i -= 1
        elif dp[i, j] == dp[i, j - 1]:
            j -= 1
        else:
            pairs.append((i - 1, j - 1))
            i -= 1
            j -= 1
    return float(dp[n, m]), pairs[::-1]


@dataclass
class SodaResult:
    score: float
    precision: float
    recall: float
    matched: list[tuple[int, int]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _sorted(events: list[Event], side: str, notes: list[str]) -> list[Event]:
    starts = [e.t_start for e in events]
    if starts != sorted(starts):
        msg = f"{side} events were not sorted by start time; sorted internally"
        notes.append(msg)
        warnings.warn(msg, stacklevel=3)
        return sorted(events, key=lambda e: (e.t_start, e.t_end))
    return events


def soda(preds: Sequence, gts: Sequence, scorer: CaptionScorer | None = None) -> SodaResult:
    """SODA F-measure; ``scorer=None`` gives SODA_tIoU (caption score fixed to 1)."""
    notes: list[str] = []
    preds = _sorted([Event.coerce(p) for p in preds], "predicted", notes)
    gts = _sorted([Event.coerce(g) for g in gts], "ground-truth", notes)
    if not preds or not gts:
        return SodaResult(0.0, 0.0, 0.0, [], notes)
    table = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            iou = tiou(p.segment, g.segment)
            if iou > 0:
                table[i, j] = iou * (1.0 if scorer is None else scorer(p.tokens, g.tokens))
    total, pairs = order_preserving_match(table)
    precision = total / len(preds)
    recall = total / len(gts)
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return SodaResult(f, precision, recall, pairs, notes)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class EvalReport:
    dvc_B4: float
    dvc_C: float
    SODA_C: float
    SODA_tIoU: float
    per_threshold: dict
    n_predictions: int
    n_references: int
    n_videos: int
    thresholds: list[float]
    substitutions: dict = field(default_factory=lambda: {
        "METEOR": "not computed; BLEU-4 is used wherever a sentence scorer is needed",
        "SODA_M": "not computed",
    })
    protocol: dict = field(default_factory=lambda: {
        "dvc_eval_matching": "each prediction scored against its best-tIoU ground truth above threshold; ground truths may be shared",
        "cider": "CIDEr-D, sigma=6, x10",
        "soda_c_scorer": "per-pair CIDEr-D with document frequencies from all ground-truth captions of the split",
    })
    per_sample: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_threshold"] = {str(k): v for k, v in self.per_threshold.items()}
        return d

    def summary_row(self) -> dict:
        return {
            "dvc_B4": self.dvc_B4,
            "dvc_C": self.dvc_C,
            "SODA_C": self.SODA_C,
            "SODA_tIoU": self.SODA_tIoU,
            "n_predictions": self.n_predictions,
            "n_references": self.n_references,
        }


def evaluate(
    predictions: Sequence[Sequence],
    references: Sequence[Sequence],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    keys: Sequence | None = None,
) -> EvalReport:
    """Evaluate a split: one list of predicted and reference events per video.

    Scores are averaged over videos. CIDEr document frequencies come from
    every ground-truth caption of the split.
    """
    if len(predictions) != len(references) or not references:
        raise ValueError("need one prediction list per reference list")
    refs = [[Event.coerce(e) for e in r] for r in references]
    preds = [[Event.coerce(e) for e in p] for p in predictions]
    corpus = CiderCorpus.from_references([[g.tokens] for r in refs for g in r])
    cider_fn = make_cider_scorer(corpus)
    scorers = {"B4": bleu_scorer, "C": cider_fn}
    keys = list(keys) if keys is not None else list(range(len(refs)))
    rows = []
    per_thr = {t: {"B4": [], "C": []} for t in thresholds}
    for key, p, r in zip(keys, preds, refs):
        d = dvc_eval(p, r, thresholds, scorers)
        for t in thresholds:
            for name in ("B4", "C"):
                per_thr[t][name].append(d["per_threshold"][t][name])
        s_c = soda(p, r, cider_fn)
        s_t = soda(p, r)
        rows.append({
            "key": key,
            "dvc_B4": d["B4"],
            "dvc_C": d["C"],
            "SODA_C": s_c.score,
            "SODA_tIoU": s_t.score,
            "n_predictions": len(p),
            "n_references": len(r),
        })
    mean = lambda k: float(np.mean([row[k] for row in rows]))
    return EvalReport(
        dvc_B4=mean("dvc_B4"),
        dvc_C=mean("dvc_C"),
        SODA_C=mean("SODA_C"),
        SODA_tIoU=mean("SODA_tIoU"),
        per_threshold={t: {k: float(np.mean(v)) for k, v in per_thr[t].items()} for t in thresholds},
        n_predictions=sum(len(p) for p in preds),
        n_references=sum(len(r) for r in refs),
        n_videos=len(refs),
        thresholds=list(thresholds),
        per_sample=rows,
    )
