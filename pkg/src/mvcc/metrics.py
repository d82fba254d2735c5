"""Caption evaluation: corpus BLEU-1..4, ROUGE-L, CIDEr-D and an exact-match METEOR.

All public scoring functions take ``candidates`` (list of token lists) and
``references`` (list of lists of token lists) and return raw scores in
[0, 1] (CIDEr-D in [0, 10]). :func:`evaluate_corpus` reports everything x100.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from mvcc.errors import ContractError, IngestionError

_TERMINAL_PUNCT = ".,;:!?\"'"

Tokens = Sequence[str]


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip terminal punctuation from each word."""
    out = []
    for word in text.lower().split():
        word = word.strip(_TERMINAL_PUNCT)
        if word:
            out.append(word)
    return out


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check(candidates, references) -> None:
    if not candidates:
        raise ContractError("empty candidate corpus")
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates but {len(references)} reference sets")
    for refs in references:
        if not refs:
            raise ContractError("every instance needs at least one reference")


def bleu(candidates, references, n_max: int = 4) -> list[float]:
    """Corpus BLEU-1..n_max with clipped counts and the closest-length brevity penalty."""
    _check(candidates, references)
    matched = [0] * n_max
    total = [0] * n_max
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        # closest reference length, shorter wins ties
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, n_max + 1):
            counts = ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0:
        return [0.0] * n_max
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    for n in range(n_max):
        if matched[n] == 0 or total[n] == 0:
            scores.extend([0.0] * (n_max - n))
            break
        log_sum += math.log(matched[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidates, references, beta: float = 1.2) -> float:
    """Mean over instances of the best LCS F-measure against any reference."""
    _check(candidates, references)
    total = 0.0
    for cand, refs in zip(candidates, references):
        best = 0.0
        for ref in refs:
            lcs = lcs_length(cand, ref)
            if lcs == 0:
                continue
            p, r = lcs / len(cand), lcs / len(ref)
            best = max(best, (1 + beta**2) * p * r / (r + beta**2 * p))
        total += best
    return total / len(candidates)


def _tfidf(counts: list[Counter], df: Counter, log_docs: float) -> tuple[list[dict], list[float]]:
    vecs, norms = [], []
    for c in counts:
        v = {g: tf * (log_docs - math.log(max(1.0, df[g]))) for g, tf in c.items()}
        vecs.append(v)
        norms.append(math.sqrt(sum(x * x for x in v.values())))
    return vecs, norms


def cider_d(candidates, references, n_max: int = 4, sigma: float = 6.0) -> float:
    """Corpus-mean CIDEr-D (raw scale, maximum 10).

    Document frequencies come from the reference sets; candidate weights are
    clipped by the reference weights and a Gaussian length penalty applies.
    """
    _check(candidates, references)
    distinct = {tuple(tuple(r) for r in refs) for refs in references}
    if len(distinct) < 2:
        warnings.warn("CIDEr-D: fewer than 2 distinct reference documents, IDF is degenerate", RuntimeWarning)
    dfs = []
    for n in range(1, n_max + 1):
        df: Counter = Counter()
        for refs in references:
            df.update(set().union(*(ngrams(r, n).keys() for r in refs)))
        dfs.append(df)
    log_docs = math.log(float(len(references)))

    total = 0.0
    for cand, refs in zip(candidates, references):
        score = 0.0
        for n in range(1, n_max + 1):
            cvecs, cnorms = _tfidf([ngrams(cand, n)], dfs[n - 1], log_docs)
            rvecs, rnorms = _tfidf([ngrams(r, n) for r in refs], dfs[n - 1], log_docs)
            cv, cn = cvecs[0], cnorms[0]
            for rv, rn, ref in zip(rvecs, rnorms, refs):
                dot = sum(min(w, rv[g]) * rv[g] for g, w in cv.items() if g in rv)
                sim = dot / (cn * rn) if cn != 0 and rn != 0 else 0.0
                delta = len(cand) - len(ref)
                score += sim * math.exp(-(delta**2) / (2 * sigma**2))
        total += score / len(refs) / n_max * 10.0
    return total / len(candidates)


def _align(cand: Tokens, ref: Tokens) -> list[tuple[int, int]]:
    """Leftmost-greedy exact unigram alignment as (cand_idx, ref_idx) pairs."""
    used = [False] * len(ref)
    pairs = []
    for i, w in enumerate(cand):
        for j, r in enumerate(ref):
            if not used[j] and r == w:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor_simplified(candidates, references, alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    """Exact-match METEOR: F_mean = 10PR/(R+9P), penalty 0.5 (chunks/matches)^3."""
    _check(candidates, references)
    total = 0.0
    for cand, refs in zip(candidates, references):
        best = 0.0
        for ref in refs:
            pairs = _align(cand, ref)
            m = len(pairs)
            if m == 0:
                continue
            p, r = m / len(cand), m / len(ref)
            fmean = p * r / (alpha * p + (1 - alpha) * r)
            chunks = 1 + sum(
                1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1)
            )
            best = max(best, fmean * (1 - gamma * (chunks / m) ** beta))
        total += best
    return total / len(candidates)


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor_simplified: float
    rouge_l: float
    cider_d: float
    n_instances: int

    COLUMNS = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor_simplified", "rouge_l", "cider_d")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def table(self, sep: str = "\t") -> str:
        header = sep.join(("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR*", "ROUGE_L", "CIDEr-D"))
        row = sep.join(f"{getattr(self, c):.2f}" for c in self.COLUMNS)
        return f"{header}\n{row}"


def score_corpus(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> MetricReport:
    """Score raw caption strings; every metric is reported x100."""
    cands = [tokenize(c) for c in candidates]
    refs = [[tokenize(r) for r in rs] for rs in references]
    b = bleu(cands, refs)
    return MetricReport(
        *(100.0 * x for x in b),
        meteor_simplified=100.0 * meteor_simplified(cands, refs),
        rouge_l=100.0 * rouge_l(cands, refs),
        cider_d=100.0 * cider_d(cands, refs),
        n_instances=len(cands),
    )


def read_candidates(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def read_references(path) -> list[list[str]]:
    refs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            items = rec["refs"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise IngestionError(f"{path}:{lineno}: expected {{'id': ..., 'refs': [...]}}") from exc
        if not items or not all(isinstance(r, str) for r in items):
            raise IngestionError(f"{path}:{lineno}: 'refs' must be a non-empty list of strings")
        refs.append(items)
    return refs


def evaluate_corpus(candidates_path, references_path) -> MetricReport:
    cands = read_candidates(candidates_path)
    refs = read_references(references_path)
    if len(cands) != len(refs):
        raise IngestionError(f"{len(cands)} candidate lines but {len(refs)} reference records")
    if not cands:
        raise IngestionError("empty corpus")
    return score_corpus(cands, refs)
