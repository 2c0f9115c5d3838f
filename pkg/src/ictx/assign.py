"""Caption assignment and in-context sequence assembly.

Caption source labels:
  gtc              ground-truth caption, manifest index 0
  mgc:<store>      model-generated caption from a named store
  mgca:<store>     anchor-selected ground truth: the stored caption picks
                   the best-matching GTC by single-reference CIDEr-D
  sicr-matched     captions returned by SICR retrieval ride through as-is
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .corpus import CaptionStore, CorpusIndex
from .metric import DocFreqTable, cider_d
from .select import ShotSet

ORDER_POLICIES = ("as-retrieved", "asc-similarity", "desc-similarity", "random")


class AssignError(ValueError):
    """Raised for unresolvable caption sources or invalid sequences."""


@dataclass(frozen=True)
class InContextSequence:
    shots: tuple[tuple[str, str], ...]  # (image_id, caption)
    test_image_id: str
    order_policy: str = "asc-similarity"

    # Note: the shot list may legitimately contain the test image (the
    # short-cut probe's "identical" condition), so only captions are checked
    # here; normal flows get the no-overlap guarantee from ShotSet.
    def __post_init__(self):
        for image_id, caption in self.shots:
            if not caption:
                raise AssignError(f"empty caption for shot {image_id!r}")

    def to_json(self) -> dict:
        return {
            "test_id": self.test_image_id,
            "shots": [{"image_id": i, "caption": c} for i, c in self.shots],
            "order_policy": self.order_policy,
        }


def assign_gtc(ids: list[str], corpus: CorpusIndex) -> list[str]:
    """Ground-truth caption index 0 (manifest order) per image."""
    return [corpus.captions_of(i)[0] for i in ids]


def assign_mgc(ids: list[str], store: CaptionStore) -> list[str]:
    missing = [i for i in ids if i not in store]
    if missing:
        raise AssignError(
            f"source {store.source!r} missing captions for: {', '.join(missing)}")
    return [store.caption(i) for i in ids]


def assign_mgca(ids: list[str], anchor_store: CaptionStore, corpus: CorpusIndex,
                table: DocFreqTable) -> list[str]:
    """For each image, pick the ground-truth caption the anchor caption
    matches best by single-reference CIDEr-D (ties: lowest index)."""
    anchors = assign_mgc(ids, anchor_store)
    out = []
    for image_id, anchor in zip(ids, anchors):
        gtcs = corpus.captions_of(image_id)
        best_j, best_score = 0, float("-inf")
        for j, gtc in enumerate(gtcs):
            score = cider_d(anchor, [gtc], table).value
            if score > best_score:
                best_j, best_score = j, score
        out.append(gtcs[best_j])
    return out


def assign_captions(ids: list[str], source: str, *, corpus: CorpusIndex,
                    stores: dict[str, CaptionStore] | None = None,
                    table: DocFreqTable | None = None,
                    matched: list[str] | None = None) -> list[str]:
    """Resolve a caption source label against the loaded stores."""
    stores = stores or {}
    if source == "gtc":
        return assign_gtc(ids, corpus)
    if source == "sicr-matched":
        if matched is None:
            raise AssignError("sicr-matched requires captions from SICR retrieval")
        if len(matched) != len(ids):
            raise AssignError("matched caption count does not match shot count")
        return list(matched)
    kind, sep, name = source.partition(":")
    if not sep or kind not in ("mgc", "mgca"):
        raise AssignError(f"unresolvable caption source label {source!r}")
    if name not in stores:
        raise AssignError(f"caption store {name!r} not loaded (source {source!r})")
    if kind == "mgc":
        return assign_mgc(ids, stores[name])
    if table is None:
        raise AssignError("mgca requires a document-frequency table")
    return assign_mgca(ids, stores[name], corpus, table)


def build_sequence(shot_set: ShotSet, captions: list[str], test_id: str,
                   order_policy: str = "asc-similarity",
                   seed: int | None = None) -> InContextSequence:
    """Zip shots with captions and order per policy. asc-similarity (the
    default) puts the most similar shot adjacent to the test slot."""
    if len(shot_set.image_ids) != len(captions):
        raise AssignError("shot/caption count mismatch")
    if order_policy not in ORDER_POLICIES:
        raise AssignError(f"unknown order policy {order_policy!r}")
    indices = list(range(len(captions)))
    if order_policy in ("asc-similarity", "desc-similarity"):
        if any(s is None for s in shot_set.scores):
            raise AssignError(f"policy {order_policy!r} requires retrieval scores")
        reverse = order_policy == "desc-similarity"
        indices.sort(key=lambda i: shot_set.scores[i], reverse=reverse)
    elif order_policy == "random":
        if seed is None:
            raise AssignError("random order policy requires a seed")
        random.Random(seed).shuffle(indices)
    shots = tuple((shot_set.image_ids[i], captions[i]) for i in indices)
    return InContextSequence(shots=shots, test_image_id=test_id,
                             order_policy=order_policy)
