"""Shared fixtures: a deterministic synthetic corpus world written to disk
and loaded through the real I/O paths.

World layout: train images in a few tight embedding clusters (one-hot
cluster vectors), five ground-truth captions per image where caption 0 is
the "consensus" one (captions 1..4 append two unique tokens each), a toy
model-generated caption store, semantic tags keyed to the cluster, and
per-caption cross-modal embeddings. Test-split captions use a disjoint
token space from the training vocabulary.
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ictx.corpus import (CaptionStore, load_captions, load_embeddings,
                         load_manifest, load_tags, write_embeddings)
from ictx.pipeline import Stores

DIM = 16
N_CLUSTERS = 5
PER_CLUSTER = 10
N_TEST = 10
N_VAL = 2


def _cluster_of(idx: int) -> int:
    return idx % N_CLUSTERS


def build_world(root: Path) -> Path:
    """Write the synthetic corpus files under `root` and return it."""
    rng = np.random.RandomState(1234)
    records = []
    train_ids = [f"t{c}{i:02d}" for c in range(N_CLUSTERS)
                 for i in range(PER_CLUSTER)]
    test_ids = [f"x{j:02d}" for j in range(N_TEST)]
    val_ids = [f"v{j:02d}" for j in range(N_VAL)]

    # caption 0 is a cluster-level consensus; 1..4 append per-image tokens
    def gtcs(img: str, cluster: int) -> list[str]:
        core = " ".join(f"c{cluster}core{j}" for j in range(6))
        caps = [core]
        for j in range(1, 5):
            caps.append(f"{core} {img}x{j}a {img}x{j}b")
        return caps

    for img in train_ids:
        records.append({"image_id": img, "split": "train",
                        "captions": gtcs(img, int(img[1]))})
    for img in val_ids:
        records.append({"image_id": img, "split": "val",
                        "captions": [f"val caption for {img}"]})
    for j, img in enumerate(test_ids):
        # disjoint token space from the training vocabulary
        caps = [f"zq{j}ref{k} zq{j}refa zq{j}refb" for k in range(5)]
        records.append({"image_id": img, "split": "test", "captions": caps})

    root.mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")

    # image embeddings: exact one-hot cluster vectors (tight clusters)
    all_ids = train_ids + val_ids + test_ids
    mat = np.zeros((len(all_ids), DIM), dtype=np.float32)
    for i, img in enumerate(all_ids):
        if img.startswith("t"):
            c = int(img[1])
        else:
            c = _cluster_of(int(img[1:]))
        mat[i, c] = 1.0
    write_embeddings(root / "embeddings.bin", all_ids, mat)

    # caption embeddings: cluster vector plus small deterministic noise
    cap_ids, cap_rows = [], []
    for i, img in enumerate(all_ids):
        if not img.startswith("t"):
            continue
        c = int(img[1])
        for k in range(5):
            cap_ids.append(f"{img}#{k}")
            row = mat[i] + rng.uniform(-0.05, 0.05, DIM).astype(np.float32)
            cap_rows.append(row)
    write_embeddings(root / "capemb.gtc.bin", cap_ids,
                     np.stack(cap_rows).astype(np.float32))

    with open(root / "tags.jsonl", "w") as f:
        for img in all_ids:
            if img.startswith("t"):
                c = int(img[1])
            else:
                c = _cluster_of(int(img[1:]))
            row = {
                "image_id": img,
                "objects": [f"obj{c}", f"obj{c}b", f"own{img}"],
                "classes": [f"cls{c}"],
                "attributes": [f"att{c}", f"att{c}b"],
                "relations": [f"rel{c}"],
            }
            if not img.startswith("t"):
                row["objects"] += [f"u{img}{i}" for i in range(6)]
            f.write(json.dumps(row) + "\n")

    with open(root / "captions.toy.jsonl", "w") as f:
        for img in train_ids + test_ids:
            f.write(json.dumps({"image_id": img, "source": "toy",
                                "caption": f"{img}core0 {img}core1 toyextra"}) + "\n")
    return root


@pytest.fixture(scope="session")
def world_dir(tmp_path_factory) -> Path:
    return build_world(tmp_path_factory.mktemp("world"))


@pytest.fixture(scope="session")
def world(world_dir) -> Stores:
    corpus = load_manifest(world_dir / "manifest.jsonl")
    images = load_embeddings(world_dir / "embeddings.bin", kind="image")
    tags = load_tags(world_dir / "tags.jsonl")
    toy = load_captions(world_dir / "captions.toy.jsonl", source="toy")
    cap_emb = load_embeddings(world_dir / "capemb.gtc.bin", kind="caption")
    cap_emb.validate_caption_ids(corpus)
    return Stores(corpus=corpus, images=images, tags=tags,
                  caption_stores={"toy": toy},
                  caption_embeddings={"gtc": cap_emb})


@pytest.fixture(scope="session")
def cider_fixture():
    path = Path(__file__).parent / "fixtures" / "cider_fixture.json"
    return json.loads(path.read_text())
