"""Consensus captioning metric (CIDEr-D) built from scratch.

Scores candidate captions by TF-IDF weighted n-gram cosine similarity
against reference captions, with candidate term frequencies clipped to
the reference counts and a Gaussian length penalty (sigma=6). Component
scores for n=1..4 are averaged and scaled by 10, matching the standard
definition; corpus-level reporting multiplies by 100 to land on the
conventional table scale.

The document-frequency table is built once from reference captions and
is immutable afterwards; scoring is pure and safe to call concurrently.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path

N_MAX = 4
SIGMA = 6.0

_NON_ALNUM = re.compile(r"[^a-z0-9]+")


class MetricError(ValueError):
    """Raised for invalid metric inputs."""


def tokenize(text: str) -> list[str]:
    """Lowercase, replace every character outside [a-z0-9] by space, split."""
    return _NON_ALNUM.sub(" ", text.lower()).split()


def ngram_counts(tokens: list[str], n_max: int = N_MAX) -> Counter:
    """Counts of all 1..n_max-grams (as token tuples) in a sentence."""
    counts: Counter = Counter()
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i:i + n])] += 1
    return counts


@dataclass
class DocFreqTable:
    """Document frequencies over reference documents (images).

    df[g] = number of images for which the n-gram g appears in at least
    one reference caption.
    """

    n_max: int
    df: dict[tuple, int]
    num_docs: int

    def idf(self, gram: tuple) -> float:
        # n-grams unseen in the corpus keep full weight (df clipped to 1)
        return math.log(self.num_docs) - math.log(max(1.0, self.df.get(gram, 0)))

    def save(self, path: str | Path) -> None:
        entries = sorted((" ".join(g), c) for g, c in self.df.items())
        with open(path, "w") as f:
            json.dump({"num_docs": self.num_docs,
                       "entries": [[g, c] for g, c in entries]}, f)

    @classmethod
    def load(cls, path: str | Path) -> "DocFreqTable":
        with open(path) as f:
            data = json.load(f)
        df = {tuple(g.split(" ")): int(c) for g, c in data["entries"]}
        return cls(n_max=N_MAX, df=df, num_docs=int(data["num_docs"]))


def build_df(references: dict[str, list[str]], n_max: int = N_MAX) -> DocFreqTable:
    """Build the df table from a map image_id -> reference captions."""
    if not references:
        raise MetricError("empty reference map")
    df: dict[tuple, int] = defaultdict(int)
    for caps in references.values():
        grams: set[tuple] = set()
        for cap in caps:
            grams.update(ngram_counts(tokenize(cap), n_max))
        for g in grams:
            df[g] += 1
    return DocFreqTable(n_max=n_max, df=dict(df), num_docs=len(references))


@dataclass(frozen=True)
class CiderScore:
    value: float
    per_n: tuple[float, float, float, float]


def _tfidf_vec(counts: Counter, table: DocFreqTable):
    """TF-IDF vectors split by n-gram length, their norms, and the
    bigram-count sentence length used by the length penalty."""
    vec = [dict() for _ in range(table.n_max)]
    norm = [0.0] * table.n_max
    length = 0
    for gram, tf in counts.items():
        n = len(gram) - 1
        w = float(tf) * table.idf(gram)
        vec[n][gram] = w
        norm[n] += w * w
        if n == 1:
            length += tf
    return vec, [math.sqrt(x) for x in norm], length


def cider_d(candidate: str, refs: list[str], table: DocFreqTable) -> CiderScore:
    """CIDEr-D score of one candidate against its reference captions."""
    if not refs:
        raise MetricError("cider_d requires at least one reference")
    cand_vec, cand_norm, cand_len = _tfidf_vec(
        ngram_counts(tokenize(candidate), table.n_max), table)
    acc = [0.0] * table.n_max
    for ref in refs:
        ref_vec, ref_norm, ref_len = _tfidf_vec(
            ngram_counts(tokenize(ref), table.n_max), table)
        delta = float(cand_len - ref_len)
        penalty = math.exp(-(delta ** 2) / (2.0 * SIGMA ** 2))
        for n in range(table.n_max):
            val = 0.0
            for gram, w in cand_vec[n].items():
                rw = ref_vec[n].get(gram)
                if rw is not None:
                    # the -D clipping: candidate TF capped at reference TF
                    val += min(w, rw) * rw
            if cand_norm[n] != 0.0 and ref_norm[n] != 0.0:
                val /= cand_norm[n] * ref_norm[n]
            acc[n] += val * penalty
    per_n = tuple(a / len(refs) for a in acc)
    return CiderScore(value=sum(per_n) / table.n_max * 10.0, per_n=per_n)


def corpus_cider(candidates: dict[str, str], references,
                 table: DocFreqTable) -> float:
    """Mean per-image CIDEr-D x100, the scale the tables report.

    `references` is either a map image_id -> caption list or a CorpusIndex.
    """
    if not candidates:
        raise MetricError("no candidates to score")
    total = 0.0
    for image_id, cand in candidates.items():
        if image_id not in references:
            raise MetricError(f"candidate for unknown image {image_id!r}")
        if hasattr(references, "captions_of"):
            refs = list(references.captions_of(image_id))
        else:
            refs = references[image_id]
        if not refs:
            raise MetricError(f"image {image_id!r} has no reference captions")
        total += cider_d(cand, list(refs), table).value
    return total / len(candidates) * 100.0
