"""Corpus ingestion: dataset manifest, ground-truth captions, precomputed
embeddings, semantic tags, and model-generated-caption stores.

All stores are immutable after load; concurrent read access is safe.

File formats:
  manifest.jsonl     {"image_id": str, "split": "train"|"val"|"test",
                      "captions": [str, ...], "file": str?}
  embeddings.bin     magic "ICEB" | u32-LE count | u32-LE dim |
                     count*dim float32-LE row-major
  <name>.ids.json    ["id0", ...] sidecar, one id per embedding row
  tags.jsonl         {"image_id": str, "objects": [...], "classes": [...],
                      "attributes": [...], "relations": [...]}
  captions.*.jsonl   {"image_id": str, "source": str, "caption": str}
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EMBEDDING_MAGIC = b"ICEB"
VALID_SPLITS = ("train", "val", "test")
TAG_CATEGORIES = ("objects", "classes", "attributes", "relations")


class CorpusError(ValueError):
    """Raised for malformed or inconsistent corpus files."""


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    split: str
    captions: tuple[str, ...]
    file: str | None = None

    def __post_init__(self):
        if self.split not in VALID_SPLITS:
            raise CorpusError(f"invalid split {self.split!r} for image {self.image_id!r}")
        if not self.captions:
            raise CorpusError(f"image {self.image_id!r} has no captions")


class CorpusIndex:
    """Manifest-ordered image records with id and split lookups."""

    def __init__(self, records: list[ImageRecord]):
        self.records = list(records)
        self.by_id: dict[str, ImageRecord] = {}
        self._split_ids: dict[str, list[str]] = {s: [] for s in VALID_SPLITS}
        for rec in self.records:
            if rec.image_id in self.by_id:
                raise CorpusError(f"duplicate image_id {rec.image_id}")
            self.by_id[rec.image_id] = rec
            self._split_ids[rec.split].append(rec.image_id)

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.by_id

    def split_ids(self, split: str) -> list[str]:
        if split not in self._split_ids:
            raise CorpusError(f"unknown split {split!r}")
        return list(self._split_ids[split])

    def split_counts(self) -> dict[str, int]:
        return {s: len(ids) for s, ids in self._split_ids.items()}

    def captions_of(self, image_id: str) -> tuple[str, ...]:
        if image_id not in self.by_id:
            raise CorpusError(f"unknown image_id {image_id!r}")
        return self.by_id[image_id].captions

    def save_manifest(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for rec in self.records:
                row = {"image_id": rec.image_id, "split": rec.split,
                       "captions": list(rec.captions)}
                if rec.file is not None:
                    row["file"] = rec.file
                f.write(json.dumps(row) + "\n")


def load_manifest(path: str | Path) -> CorpusIndex:
    """Load a jsonl manifest. Hard error on duplicate ids or malformed lines."""
    records: list[ImageRecord] = []
    seen: set[str] = set()
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                rec = ImageRecord(
                    image_id=row["image_id"],
                    split=row["split"],
                    captions=tuple(row["captions"]),
                    file=row.get("file"),
                )
            except CorpusError:
                raise
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"malformed manifest line {lineno}: {exc}") from exc
            if rec.image_id in seen:
                raise CorpusError(f"duplicate image_id {rec.image_id} at line {lineno}")
            seen.add(rec.image_id)
            records.append(rec)
    return CorpusIndex(records)


def candidate_pool(corpus: CorpusIndex, split: str, exclude: str) -> list[str]:
    """All ids of `split` in manifest order, minus `exclude`."""
    return [i for i in corpus.split_ids(split) if i != exclude]


@dataclass
class EmbeddingStore:
    """Dense vectors, one row per id. Rows are stored as loaded (raw);
    unit normalization is the retrieval operation's job."""

    ids: list[str]
    matrix: np.ndarray  # (len(ids), dim) float32
    kind: str = "image"
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.ids) != self.matrix.shape[0]:
            raise CorpusError(
                f"id count mismatch: {len(self.ids)} ids vs {self.matrix.shape[0]} rows")
        if not np.all(np.isfinite(self.matrix)):
            raise CorpusError("embedding matrix contains non-finite values")
        self.index = {}
        for i, eid in enumerate(self.ids):
            if eid in self.index:
                raise CorpusError(f"duplicate embedding id {eid!r}")
            self.index[eid] = i

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __contains__(self, eid: str) -> bool:
        return eid in self.index

    def row(self, eid: str) -> np.ndarray:
        if eid not in self.index:
            raise CorpusError(f"missing embedding for id {eid!r}")
        return self.matrix[self.index[eid]]

    def validate_caption_ids(self, corpus: CorpusIndex) -> None:
        """Every caption id must resolve to (image_id, k) with k < len(captions)."""
        for eid in self.ids:
            image_id, _, k = eid.rpartition("#")
            if not image_id or not k.isdigit():
                raise CorpusError(f"caption id {eid!r} is not of the form '<image_id>#<k>'")
            if image_id not in corpus:
                raise CorpusError(f"caption id {eid!r}: unknown image {image_id!r}")
            if int(k) >= len(corpus.by_id[image_id].captions):
                raise CorpusError(f"caption id {eid!r}: index out of range")


def sidecar_path(bin_path: str | Path) -> Path:
    """embeddings.bin -> embeddings.ids.json"""
    p = Path(bin_path)
    name = p.name[:-4] if p.name.endswith(".bin") else p.name
    return p.with_name(name + ".ids.json")


def load_embeddings(bin_path: str | Path,
                    sidecar: str | Path | None = None,
                    kind: str = "image") -> EmbeddingStore:
    """Load the fixed binary layout plus its id sidecar."""
    sidecar = sidecar_path(bin_path) if sidecar is None else sidecar
    with open(bin_path, "rb") as f:
        header = f.read(12)
        if len(header) < 12 or header[:4] != EMBEDDING_MAGIC:
            raise CorpusError(f"bad magic in {bin_path}")
        count, dim = struct.unpack("<II", header[4:12])
        payload = f.read()
    expected = count * dim * 4
    if len(payload) != expected:
        raise CorpusError(
            f"payload size mismatch in {bin_path}: expected {expected} bytes, got {len(payload)}")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)
    with open(sidecar) as f:
        ids = json.load(f)
    if len(ids) != count:
        raise CorpusError(f"id count mismatch: header says {count}, sidecar has {len(ids)}")
    return EmbeddingStore(ids=list(ids), matrix=matrix, kind=kind)


def write_embeddings(bin_path: str | Path, ids: list[str], matrix: np.ndarray,
                     sidecar: str | Path | None = None) -> None:
    """Emit the binary layout; any producer can mirror this."""
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise CorpusError("matrix shape does not match id list")
    sidecar = sidecar_path(bin_path) if sidecar is None else sidecar
    with open(bin_path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        f.write(matrix.tobytes(order="C"))
    with open(sidecar, "w") as f:
        json.dump(list(ids), f)


@dataclass(frozen=True)
class TagSet:
    """Typed semantic tags for one image (all lowercase)."""

    image_id: str
    objects: frozenset[str] = frozenset()
    classes: frozenset[str] = frozenset()
    attributes: frozenset[str] = frozenset()
    relations: frozenset[str] = frozenset()

    def category(self, name: str) -> frozenset[str]:
        if name not in TAG_CATEGORIES:
            raise CorpusError(f"unknown tag category {name!r}")
        return getattr(self, name)

    def union(self) -> frozenset[str]:
        return self.objects | self.classes | self.attributes | self.relations

    def is_empty(self) -> bool:
        return not self.union()


def _clean_tags(values) -> frozenset[str]:
    out = set()
    for v in values:
        v = str(v).strip().lower()
        if v:
            out.add(v)
    return frozenset(out)


def load_tags(path: str | Path) -> dict[str, TagSet]:
    """Load tags.jsonl; missing category keys become empty sets."""
    tags: dict[str, TagSet] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                image_id = row["image_id"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"malformed tags line {lineno}: {exc}") from exc
            if image_id in tags:
                raise CorpusError(f"duplicate image_id {image_id} at line {lineno}")
            tags[image_id] = TagSet(
                image_id=image_id,
                **{c: _clean_tags(row.get(c, ())) for c in TAG_CATEGORIES},
            )
    return tags


class CaptionStore:
    """One caption per image for a named source (e.g. 'tf@66', 'vlm0')."""

    def __init__(self, source: str, captions: dict[str, str]):
        self.source = source
        self.by_id = dict(captions)
        for image_id, cap in self.by_id.items():
            if not cap:
                raise CorpusError(f"empty caption for {image_id!r} in source {source!r}")

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.by_id

    def __len__(self) -> int:
        return len(self.by_id)

    def caption(self, image_id: str) -> str:
        if image_id not in self.by_id:
            raise CorpusError(f"no caption for {image_id!r} in source {self.source!r}")
        return self.by_id[image_id]

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for image_id in self.by_id:
                f.write(json.dumps({"image_id": image_id, "source": self.source,
                                    "caption": self.by_id[image_id]}) + "\n")


def load_captions(path: str | Path, source: str | None = None) -> CaptionStore:
    """Load captions.<source>.jsonl; exactly one entry per image."""
    captions: dict[str, str] = {}
    store_source = source
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                image_id, row_source, cap = row["image_id"], row["source"], row["caption"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"malformed caption line {lineno}: {exc}") from exc
            if store_source is None:
                store_source = row_source
            elif row_source != store_source:
                raise CorpusError(
                    f"mixed sources in {path}: {row_source!r} vs {store_source!r} at line {lineno}")
            if image_id in captions:
                raise CorpusError(f"duplicate image_id {image_id} at line {lineno}")
            captions[image_id] = cap
    if store_source is None:
        raise CorpusError(f"empty caption store {path}")
    return CaptionStore(store_source, captions)
