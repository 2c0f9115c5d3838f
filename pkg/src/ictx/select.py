"""Shot-selection strategies: random sampling, similarity-based retrieval
over image embeddings / semantic tags / cross-modal caption embeddings,
and the two diversity-based tag strategies.

All strategies are pure functions over immutable stores. Retrieval is
exact full-scan top-k; ties break by ascending id so results are
reproducible regardless of worker counts.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np

from .corpus import TAG_CATEGORIES, EmbeddingStore, TagSet

STRATEGIES = ("rs", "siir-clip", "siir-tag", "sicr-clip", "diir-tr", "diir-tt")


class SelectionError(ValueError):
    """Raised for invalid selection inputs."""


@dataclass
class SelectionSpec:
    strategy: str
    n_shots: int
    pool: list[str]
    seed: int = 0
    caption_source: str | None = None  # SICR mediator store
    jaccard: bool = False  # optional normalized tag similarity

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SelectionError(f"unknown strategy {self.strategy!r}")
        if self.n_shots < 1:
            raise SelectionError("n_shots must be positive")
        if self.n_shots > len(self.pool):
            raise SelectionError(
                f"n_shots={self.n_shots} exceeds pool size {len(self.pool)}")
        if self.strategy == "diir-tt" and self.n_shots % 4 != 0:
            raise SelectionError("diir-tt requires n_shots divisible by 4")


@dataclass
class ShotSet:
    test_id: str
    strategy: str
    image_ids: list[str]
    scores: list[float | None]
    backfills: int = 0
    matched_captions: list[str] | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.image_ids) != len(self.scores):
            raise SelectionError("image_ids and scores length mismatch")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise SelectionError("duplicate image ids in shot set")
        if self.test_id in self.image_ids:
            raise SelectionError("shot set contains the test image")

    def to_json(self) -> dict:
        return {
            "test_id": self.test_id,
            "strategy": self.strategy,
            "shots": [{"image_id": i, "score": s}
                      for i, s in zip(self.image_ids, self.scores)],
        }


def _unit_rows(store: EmbeddingStore) -> np.ndarray:
    norms = np.linalg.norm(store.matrix, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise SelectionError(f"zero-norm embedding row for id {store.ids[zero[0]]!r}")
    return store.matrix / norms[:, None]


def cosine_topk(query: np.ndarray, store: EmbeddingStore, k: int,
                exclude: frozenset[str] | set[str] = frozenset()) -> list[tuple[str, float]]:
    """Exact top-k by cosine similarity on unit-normalized vectors.

    Descending score; exact ties break by ascending id.
    """
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (store.dim,):
        raise SelectionError(f"query dim {query.shape} != store dim {store.dim}")
    qnorm = np.linalg.norm(query)
    if qnorm == 0.0:
        raise SelectionError("zero-norm query vector")
    rows = _unit_rows(store)
    sims = rows.astype(np.float64) @ (query / qnorm)
    eligible = [i for i, eid in enumerate(store.ids) if eid not in exclude]
    if k > len(eligible):
        raise SelectionError(f"k={k} exceeds {len(eligible)} eligible rows")
    order = sorted(eligible, key=lambda i: (-sims[i], store.ids[i]))[:k]
    return [(store.ids[i], float(sims[i])) for i in order]


def tag_similarity(a: TagSet, b: TagSet, jaccard: bool = False) -> float:
    """Set-intersection cardinality over the union of all four categories."""
    ua, ub = a.union(), b.union()
    inter = len(ua & ub)
    if not jaccard:
        return inter
    union = len(ua | ub)
    return inter / union if union else 0.0


def select_rs(spec: SelectionSpec, test_id: str) -> ShotSet:
    """Seeded sampling without replacement from the candidate pool."""
    pool = [i for i in spec.pool if i != test_id]
    if spec.n_shots > len(pool):
        raise SelectionError(f"n_shots={spec.n_shots} exceeds pool size {len(pool)}")
    picked = random.Random(spec.seed).sample(pool, spec.n_shots)
    return ShotSet(test_id=test_id, strategy="rs", image_ids=picked,
                   scores=[None] * len(picked))


def select_siir_clip(spec: SelectionSpec, test_id: str,
                     images: EmbeddingStore) -> ShotSet:
    """Top-n pool images by image-embedding cosine to the test image."""
    query = images.row(test_id)
    pool = set(spec.pool) - {test_id}
    exclude = {i for i in images.ids if i not in pool}
    missing = [i for i in pool if i not in images]
    if missing:
        raise SelectionError(f"missing image embeddings for {sorted(missing)[:5]}")
    ranked = cosine_topk(query, images, spec.n_shots, exclude=frozenset(exclude))
    return ShotSet(test_id=test_id, strategy="siir-clip",
                   image_ids=[i for i, _ in ranked],
                   scores=[s for _, s in ranked])


def _rank_by_tags(query_tags: TagSet, pool: list[str], tags: dict[str, TagSet],
                  jaccard: bool = False) -> list[tuple[str, float]]:
    """Pool ranked by tag similarity, ties by ascending id. Pool images
    without tags score 0."""
    empty = {}
    scored = []
    for pid in pool:
        t = tags.get(pid)
        if t is None:
            t = empty.setdefault(pid, TagSet(image_id=pid))
        scored.append((pid, float(tag_similarity(query_tags, t, jaccard))))
    scored.sort(key=lambda x: (-x[1], x[0]))
    return scored


def select_siir_tag(spec: SelectionSpec, test_id: str,
                    tags: dict[str, TagSet]) -> ShotSet:
    """Top-n pool images by tag intersection with the test image."""
    test_tags = tags.get(test_id)
    if test_tags is None or test_tags.is_empty():
        raise SelectionError(f"test image {test_id!r} has an empty tag set")
    pool = [i for i in spec.pool if i != test_id]
    ranked = _rank_by_tags(test_tags, pool, tags, spec.jaccard)[:spec.n_shots]
    return ShotSet(test_id=test_id, strategy="siir-tag",
                   image_ids=[i for i, _ in ranked],
                   scores=[s for _, s in ranked])


def caption_owner(caption_id: str) -> str:
    """'img42#3' -> 'img42'"""
    owner, sep, _ = caption_id.rpartition("#")
    if not sep:
        raise SelectionError(f"caption id {caption_id!r} lacks '#<k>' suffix")
    return owner


def select_sicr_clip(spec: SelectionSpec, test_id: str, images: EmbeddingStore,
                     caption_embeddings: EmbeddingStore,
                     caption_text) -> ShotSet:
    """Rank captions by cross-modal cosine to the test image; keep the
    first caption per distinct owning image until n images are collected.

    `caption_text(caption_id) -> str` resolves matched caption strings,
    which ride along on the returned shot set.
    """
    query = images.row(test_id)
    pool = set(spec.pool) - {test_id}
    exclude = {cid for cid in caption_embeddings.ids if caption_owner(cid) not in pool}
    eligible = len(caption_embeddings.ids) - len(exclude)
    ranked = cosine_topk(query, caption_embeddings, eligible, exclude=frozenset(exclude))
    image_ids: list[str] = []
    scores: list[float] = []
    captions: list[str] = []
    seen: set[str] = set()
    for cid, score in ranked:
        owner = caption_owner(cid)
        if owner in seen:
            continue
        seen.add(owner)
        image_ids.append(owner)
        scores.append(score)
        captions.append(caption_text(cid))
        if len(image_ids) == spec.n_shots:
            break
    if len(image_ids) < spec.n_shots:
        raise SelectionError(
            f"only {len(image_ids)} distinct caption owners available, need {spec.n_shots}")
    return ShotSet(test_id=test_id, strategy="sicr-clip", image_ids=image_ids,
                   scores=scores, matched_captions=captions)


def select_diir_tr(spec: SelectionSpec, test_id: str,
                   tags: dict[str, TagSet]) -> ShotSet:
    """Shuffle the test image's pooled tags, split into n contiguous
    clusters, and take the best-matching unseen image per cluster."""
    test_tags = tags.get(test_id)
    if test_tags is None or test_tags.is_empty():
        raise SelectionError(f"test image {test_id!r} has an empty tag set")
    all_tags = sorted(test_tags.union())
    if len(all_tags) < spec.n_shots:
        raise SelectionError("insufficient tags for DIIR-TR")
    random.Random(spec.seed).shuffle(all_tags)
    pool = [i for i in spec.pool if i != test_id]
    base, extra = divmod(len(all_tags), spec.n_shots)
    image_ids: list[str] = []
    scores: list[float] = []
    chosen: set[str] = set()
    pos = 0
    for i in range(spec.n_shots):
        size = base + (1 if i < extra else 0)
        cluster = TagSet(image_id=test_id,
                         objects=frozenset(all_tags[pos:pos + size]))
        pos += size
        for pid, score in _rank_by_tags(cluster, pool, tags, spec.jaccard):
            if pid not in chosen:
                chosen.add(pid)
                image_ids.append(pid)
                scores.append(score)
                break
    return ShotSet(test_id=test_id, strategy="diir-tr",
                   image_ids=image_ids, scores=scores)


def select_diir_tt(spec: SelectionSpec, test_id: str,
                   tags: dict[str, TagSet]) -> ShotSet:
    """Top-k per tag category in fixed order; categories with no test
    tags (or exhausted candidates) backfill from the pooled ranking."""
    k = spec.n_shots // 4
    test_tags = tags.get(test_id)
    if test_tags is None:
        raise SelectionError(f"no tags for test image {test_id!r}")
    pool = [i for i in spec.pool if i != test_id]
    if len(pool) < spec.n_shots:
        raise SelectionError(f"pool smaller than n_shots={spec.n_shots}")
    pooled_ranking = _rank_by_tags(test_tags, pool, tags, spec.jaccard)
    image_ids: list[str] = []
    scores: list[float] = []
    chosen: set[str] = set()
    backfills = 0

    def backfill():
        nonlocal backfills
        for pid, score in pooled_ranking:
            if pid not in chosen:
                chosen.add(pid)
                image_ids.append(pid)
                scores.append(score)
                backfills += 1
                return

    for category in ("objects", "classes", "attributes", "relations"):
        cat_tags = test_tags.category(category)
        taken = 0
        if cat_tags:
            query = TagSet(image_id=test_id, objects=frozenset(cat_tags))
            restricted = {
                pid: TagSet(image_id=pid,
                            objects=tags[pid].category(category) if pid in tags else frozenset())
                for pid in pool
            }
            for pid, score in _rank_by_tags(query, pool, restricted, spec.jaccard):
                if pid in chosen:
                    continue
                chosen.add(pid)
                image_ids.append(pid)
                scores.append(score)
                taken += 1
                if taken == k:
                    break
        for _ in range(k - taken):
            backfill()
    return ShotSet(test_id=test_id, strategy="diir-tt", image_ids=image_ids,
                   scores=scores, backfills=backfills)


def select_shots(spec: SelectionSpec, test_id: str, *,
                 images: EmbeddingStore | None = None,
                 tags: dict[str, TagSet] | None = None,
                 caption_embeddings: EmbeddingStore | None = None,
                 caption_text=None) -> ShotSet:
    """Dispatch on spec.strategy, validating that its stores are present."""
    if spec.strategy == "rs":
        return select_rs(spec, test_id)
    if spec.strategy == "siir-clip":
        if images is None:
            raise SelectionError("siir-clip requires image embeddings")
        return select_siir_clip(spec, test_id, images)
    if spec.strategy == "siir-tag":
        if tags is None:
            raise SelectionError("siir-tag requires tags")
        return select_siir_tag(spec, test_id, tags)
    if spec.strategy == "sicr-clip":
        if images is None or caption_embeddings is None or caption_text is None:
            raise SelectionError("sicr-clip requires image and caption embeddings")
        return select_sicr_clip(spec, test_id, images, caption_embeddings, caption_text)
    if spec.strategy == "diir-tr":
        if tags is None:
            raise SelectionError("diir-tr requires tags")
        return select_diir_tr(spec, test_id, tags)
    if spec.strategy == "diir-tt":
        if tags is None:
            raise SelectionError("diir-tt requires tags")
        return select_diir_tt(spec, test_id, tags)
    raise SelectionError(f"unknown strategy {spec.strategy!r}")
