"""Independent CIDEr-D oracle, following the widely used reference scorer
(defaultdict TF-IDF vectors, clipped similarity, Gaussian length penalty),
adapted to take an externally built document-frequency table.

Kept deliberately separate from ictx.metric: different data structures and
code path so agreement between the two is a meaningful check. Tokenization
is shared on purpose; the comparison is about the metric math.
"""

from collections import defaultdict
import math

import numpy as np

from ictx.metric import tokenize


def precook(s, n=4):
    words = tokenize(s)
    counts = defaultdict(int)
    for k in range(1, n + 1):
        for i in range(len(words) - k + 1):
            counts[tuple(words[i:i + k])] += 1
    return counts


def oracle_cider_d(candidate, refs, doc_freq, num_docs, n=4, sigma=6.0):
    """Per-image CIDEr-D score (the x10-scaled standard value)."""
    ref_len = np.log(float(num_docs))

    def counts2vec(cnts):
        vec = [defaultdict(float) for _ in range(n)]
        length = 0
        norm = [0.0 for _ in range(n)]
        for (ngram, term_freq) in cnts.items():
            df = np.log(max(1.0, doc_freq.get(ngram, 0.0)))
            k = len(ngram) - 1
            vec[k][ngram] = float(term_freq) * (ref_len - df)
            norm[k] += pow(vec[k][ngram], 2)
            if k == 1:
                length += term_freq
        norm = [np.sqrt(x) for x in norm]
        return vec, norm, length

    def sim(vec_hyp, vec_ref, norm_hyp, norm_ref, length_hyp, length_ref):
        delta = float(length_hyp - length_ref)
        val = np.array([0.0 for _ in range(n)])
        for k in range(n):
            for (ngram, count) in vec_hyp[k].items():
                val[k] += min(vec_hyp[k][ngram], vec_ref[k][ngram]) * vec_ref[k][ngram]
            if (norm_hyp[k] != 0) and (norm_ref[k] != 0):
                val[k] /= (norm_hyp[k] * norm_ref[k])
            assert not math.isnan(val[k])
            val[k] *= np.e ** (-(delta ** 2) / (2 * sigma ** 2))
        return val

    vec, norm, length = counts2vec(precook(candidate, n))
    score = np.array([0.0 for _ in range(n)])
    for ref in refs:
        vec_ref, norm_ref, length_ref = counts2vec(precook(ref, n))
        score += sim(vec, vec_ref, norm, norm_ref, length, length_ref)
    score_avg = np.mean(score)
    score_avg /= len(refs)
    score_avg *= 10.0
    return float(score_avg)


def oracle_build_df(references, n=4):
    """Brute-force document frequencies over a map image_id -> captions."""
    doc_freq = defaultdict(float)
    for caps in references.values():
        grams = set()
        for cap in caps:
            grams.update(precook(cap, n).keys())
        for g in grams:
            doc_freq[g] += 1
    return dict(doc_freq), len(references)
