"""Scoring: equivalence-aware WER, smoothed BLEU-4, significance tests.

Both metrics run on whitespace tokens after `strip_for_scoring`, which
removes annotation tags, task and speaker markers, punctuation, and case,
so rich and normalized transcripts are comparable.  Sentence and corpus
BLEU share one n-gram statistics routine; the data filter reuses the
sentence score, so there is a single BLEU definition in the package.
"""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from .errors import ContractError, FormatError
from .textproc import _TAG_RE, normalize

MAX_ORDER = 4


def strip_for_scoring(text: str) -> list[str]:
    """Tokens for metric computation: lowercase, no punctuation or tags."""
    return [w for w in normalize(text, "normalized").split()
            if not _TAG_RE.fullmatch(w)]


class EquivalenceTable:
    """Surface-form to canonical-form map applied before WER alignment.

    Chains resolve at load (a->b plus b->c canonicalizes a to c), so
    lookups are single-step and canonicalization is idempotent.
    """

    def __init__(self, mapping: dict[str, str] | None = None):
        raw = dict(mapping or {})
        self.mapping: dict[str, str] = {}
        for surface in raw:
            seen = [surface]
            target = raw[surface]
            while target in raw:
                if target in seen:
                    raise FormatError(
                        f"equivalence cycle through {' -> '.join(seen + [target])}"
                    )
                seen.append(target)
                target = raw[target]
            self.mapping[surface] = target

    @classmethod
    def load(cls, path) -> "EquivalenceTable":
        mapping: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for ln, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or not parts[0] or not parts[1]:
                    raise FormatError(
                        f"{path}:{ln}: expected 'surface<TAB>canonical', got {line!r}"
                    )
                mapping[parts[0]] = parts[1]
        return cls(mapping)

    def canonical(self, token: str) -> str:
        return self.mapping.get(token, token)

    def apply(self, tokens: list[str]) -> list[str]:
        return [self.canonical(t) for t in tokens]


# ---------------------------------------------------------------------------
# word error rate


def wer(hyp_tokens: list[str], ref_tokens: list[str],
        eq: EquivalenceTable | None = None) -> dict[str, float]:
    """Levenshtein word alignment; returns wer%, sub/del/ins counts and N.

    Deletions count reference words the hypothesis dropped.  With equal
    unit costs the alignment is found by dynamic programming; ties prefer
    substitution, then deletion, which fixes the reported split.
    """
    if eq is not None:
        hyp_tokens = eq.apply(hyp_tokens)
        ref_tokens = eq.apply(ref_tokens)
    n, m = len(ref_tokens), len(hyp_tokens)
    if n == 0:
        raise ContractError("wer needs a non-empty reference")
    # dist[i, j]: cost of aligning ref[:i] with hyp[:j]
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            hit = ref_tokens[i - 1] == hyp_tokens[j - 1]
            dist[i, j] = min(dist[i - 1, j - 1] + (0 if hit else 1),
                             dist[i - 1, j] + 1,
                             dist[i, j - 1] + 1)
    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (
            0 if ref_tokens[i - 1] == hyp_tokens[j - 1] else 1
        ):
            subs += ref_tokens[i - 1] != hyp_tokens[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return {
        "wer": 100.0 * (subs + dels + ins) / n,
        "sub": subs, "del": dels, "ins": ins, "n": n,
    }


def corpus_wer(hyps: list[list[str]], refs: list[list[str]],
               eq: EquivalenceTable | None = None) -> dict[str, float]:
    """Error counts pooled over segments, rate over the pooled N."""
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    total = {"sub": 0, "del": 0, "ins": 0, "n": 0}
    for h, r in zip(hyps, refs):
        one = wer(h, r, eq)
        for k in total:
            total[k] += one[k]
    total["wer"] = 100.0 * (total["sub"] + total["del"] + total["ins"]) / total["n"]
    return total


# ---------------------------------------------------------------------------
# BLEU


def _ngram_stats(hyp: list[str], ref: list[str]) -> np.ndarray:
    """Per-order [matches, totals] (2, MAX_ORDER) plus lengths appended.

    Row layout: [m1..m4, t1..t4, len(hyp), len(ref)] for cheap pooling.
    """
    row = np.zeros(2 * MAX_ORDER + 2, dtype=np.int64)
    for k in range(1, MAX_ORDER + 1):
        grams_h = Counter(tuple(hyp[i:i + k]) for i in range(len(hyp) - k + 1))
        grams_r = Counter(tuple(ref[i:i + k]) for i in range(len(ref) - k + 1))
        row[k - 1] = sum(min(c, grams_r[g]) for g, c in grams_h.items())
        row[MAX_ORDER + k - 1] = max(len(hyp) - k + 1, 0)
    row[-2], row[-1] = len(hyp), len(ref)
    return row


def _bleu_from_stats(stats: np.ndarray) -> np.ndarray:
    """BLEU in [0, 100] from pooled stats, vectorized over leading axes.

    Precisions are matches/totals; orders above 1 with zero matches take
    (matches+1)/(totals+1).  A unigram precision of zero, or an empty
    hypothesis, scores 0.  Brevity penalty e^(1 - r/c) applies when the
    hypothesis is shorter than the reference.
    """
    stats = np.asarray(stats, dtype=np.float64)
    m = stats[..., :MAX_ORDER]
    t = stats[..., MAX_ORDER:2 * MAX_ORDER]
    c, r = stats[..., -2], stats[..., -1]
    smooth = (m == 0.0) & (np.arange(MAX_ORDER) > 0)
    num = np.where(smooth, m + 1.0, m)
    den = np.where(smooth, t + 1.0, t)
    dead = (num == 0.0) | (den == 0.0)
    logp = np.where(dead, -np.inf, np.log(np.where(num > 0, num, 1.0))
                    - np.log(np.where(den > 0, den, 1.0)))
    mean = logp.mean(axis=-1)
    bp = np.where(c >= r, 0.0, np.where(c > 0, 1.0 - r / np.where(c > 0, c, 1.0),
                                        -np.inf))
    score = 100.0 * np.exp(mean + bp)
    return np.where(np.isfinite(mean + bp), score, 0.0)


def bleu4(hyp_tokens: list[str], ref_tokens: list[str]) -> float:
    """Smoothed sentence BLEU-4 in [0, 100]."""
    if len(ref_tokens) == 0:
        raise ContractError("bleu needs a non-empty reference")
    return float(_bleu_from_stats(_ngram_stats(hyp_tokens, ref_tokens)))


def corpus_bleu(hyps: list[list[str]], refs: list[list[str]]) -> float:
    """BLEU over pooled n-gram counts (the paper-style corpus score)."""
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ContractError("corpus bleu needs at least one segment")
    stats = np.stack([_ngram_stats(h, r) for h, r in zip(hyps, refs)])
    return float(_bleu_from_stats(stats.sum(axis=0)))


# ---------------------------------------------------------------------------
# significance


def bootstrap_bleu_pvalue(hyps_a: list[list[str]], hyps_b: list[list[str]],
                          refs: list[list[str]], n_resamples: int = 1000,
                          seed: int = 0) -> float:
    """Paired bootstrap over segments for corpus-BLEU differences.

    Segments are resampled with replacement; the two-sided p-value is
    min(1, 2 * (flips + 1) / (n_resamples + 1)) where a flip is a
    resample whose BLEU difference loses the sign of the full-corpus
    difference (ties count as flips).  Identical full-corpus scores give
    p = 1 outright.
    """
    if not (len(hyps_a) == len(hyps_b) == len(refs)):
        raise ContractError("bootstrap needs aligned hypothesis/reference lists")
    if len(refs) < 2:
        raise ContractError("bootstrap needs at least 2 segments")
    stats_a = np.stack([_ngram_stats(h, r) for h, r in zip(hyps_a, refs)])
    stats_b = np.stack([_ngram_stats(h, r) for h, r in zip(hyps_b, refs)])
    d_full = float(_bleu_from_stats(stats_a.sum(axis=0))
                   - _bleu_from_stats(stats_b.sum(axis=0)))
    if d_full == 0.0:
        return 1.0
    s = len(refs)
    idx = np.random.default_rng(seed).integers(0, s, size=(n_resamples, s))
    d = (_bleu_from_stats(stats_a[idx].sum(axis=1))
         - _bleu_from_stats(stats_b[idx].sum(axis=1)))
    flips = int(np.sum(d * d_full <= 0.0))
    return min(1.0, 2.0 * (flips + 1) / (n_resamples + 1))


def mapsswe_pvalue(errors_a, errors_b) -> float:
    """Matched-pairs two-sided test on per-segment error count differences.

    Z = mean(d) / sqrt(var(d, ddof=1) / n); p = erfc(|Z| / sqrt(2)).
    Degenerate spread: identical vectors give 1, a constant nonzero
    difference gives 0.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("mapsswe needs two aligned 1-D error vectors")
    if len(a) < 2:
        raise ContractError("mapsswe needs at least 2 segments")
    d = a - b
    mean = float(d.mean())
    var = float(d.var(ddof=1))
    if var == 0.0:
        return 1.0 if mean == 0.0 else 0.0
    z = mean / math.sqrt(var / len(d))
    return math.erfc(abs(z) / math.sqrt(2.0))
