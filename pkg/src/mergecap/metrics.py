"""Corpus caption metrics: BLEU-4, ROUGE-L and CIDEr-D.

All scorers take ``candidates`` (one token list per image) and
``references`` (a list of token lists per image), aligned by position.
Strings are accepted anywhere a token list is and are run through
:func:`tokenize` first.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

TOKENIZER_VERSION = "lower-strip-ascii-punct-whitespace/1"

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, drop ASCII punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


def _as_tokens(caption) -> tuple:
    if isinstance(caption, str):
        return tuple(tokenize(caption))
    return tuple(caption)


def _prepare(candidates, references) -> tuple[list[tuple], list[list[tuple]]]:
    if len(candidates) == 0:
        raise ValueError("no candidates to score")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    cands = [_as_tokens(c) for c in candidates]
    refs = []
    for k, rs in enumerate(references):
        if len(rs) == 0:
            raise ValueError(f"image {k} has no references")
        refs.append([_as_tokens(r) for r in rs])
    return cands, refs


def ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# --------------------------------------------------------------------------
# BLEU


def bleu4(candidates, references) -> float:
    """Corpus BLEU with uniform 1..4-gram weights and the closest-length brevity penalty."""
    cands, refs = _prepare(candidates, references)
    matched = [0] * 4
    total = [0] * 4
    cand_len = ref_len = 0
    for cand, rs in zip(cands, refs):
        cand_len += len(cand)
        # closest reference length, shorter wins ties
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in rs)[1]
        for n in range(1, 5):
            counts = ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in rs:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0 or min(matched) == 0:
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matched, total)) / 4.0
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_prec)


# --------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_pair(cand: Sequence, ref: Sequence, beta: float = 1.2) -> float:
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(candidates, references, beta: float = 1.2) -> float:
    """Mean over images of the best LCS F-measure against any reference."""
    cands, refs = _prepare(candidates, references)
    scores = [max(rouge_l_pair(c, r, beta) for r in rs) for c, rs in zip(cands, refs)]
    return sum(scores) / len(scores)


# --------------------------------------------------------------------------
# CIDEr-D


@dataclass
class IdfTable:
    """Document frequencies of 1..4-grams over a reference corpus.

    An image counts once per n-gram no matter how many of its references
    contain it.
    """

    n_images: int
    doc_freq: list[Counter] = field(default_factory=lambda: [Counter() for _ in range(4)])

    @classmethod
    def from_references(cls, references: Iterable[Sequence]) -> "IdfTable":
        table = cls(0)
        for rs in references:
            table.n_images += 1
            for n in range(1, 5):
                seen = set()
                for r in rs:
                    seen.update(ngrams(_as_tokens(r), n))
                table.doc_freq[n - 1].update(seen)
        return table

    def idf(self, gram: tuple) -> float:
        df = self.doc_freq[len(gram) - 1].get(gram, 0)
        return math.log(float(self.n_images)) - math.log(max(1.0, float(df)))


def _cider_vectors(tokens: Sequence, idf: IdfTable) -> tuple[list[dict], list[float]]:
    vecs, norms = [], []
    for n in range(1, 5):
        vec = {g: c * idf.idf(g) for g, c in ngrams(tokens, n).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def _cider_sim(cv, cn, clen, rv, rn, rlen, sigma: float) -> list[float]:
    delta = float(clen - rlen)
    penalty = math.exp(-(delta ** 2) / (2 * sigma ** 2))
    out = []
    for n in range(4):
        val = sum(min(w, rv[n].get(g, 0.0)) * rv[n].get(g, 0.0) for g, w in cv[n].items())
        if cn[n] != 0 and rn[n] != 0:
            val /= cn[n] * rn[n]
        out.append(val * penalty)
    return out


def cider_d_image(cand, refs, idf: IdfTable, sigma: float = 6.0) -> float:
    """CIDEr-D of one candidate against its references."""
    if idf.n_images <= 0:
        raise ValueError("IDF table is empty (corpus image count is 0)")
    if len(refs) == 0:
        raise ValueError("no references")
    cand = _as_tokens(cand)
    cv, cn = _cider_vectors(cand, idf)
    acc = [0.0] * 4
    for r in refs:
        r = _as_tokens(r)
        rv, rn = _cider_vectors(r, idf)
        for n, s in enumerate(_cider_sim(cv, cn, len(cand), rv, rn, len(r), sigma)):
            acc[n] += s
    return 10.0 * sum(acc) / 4.0 / len(refs)


def cider_d(candidates, references, idf: IdfTable | None = None, sigma: float = 6.0) -> float:
    """Corpus CIDEr-D; IDF comes from ``references`` unless a table is passed."""
    cands, refs = _prepare(candidates, references)
    if idf is None:
        idf = IdfTable.from_references(refs)
    if idf.n_images <= 0:
        raise ValueError("IDF table is empty (corpus image count is 0)")
    scores = [cider_d_image(c, rs, idf, sigma) for c, rs in zip(cands, refs)]
    return sum(scores) / len(scores)


def evaluate_captions(candidates, references) -> dict:
    """The report dictionary written by the ``eval`` command."""
    cands, refs = _prepare(candidates, references)
    return {
        "bleu4": bleu4(cands, refs),
        "rouge_l": rouge_l(cands, refs),
        "cider_d": cider_d(cands, refs),
        "n_images": len(cands),
        "tokenizer_version": TOKENIZER_VERSION,
    }
