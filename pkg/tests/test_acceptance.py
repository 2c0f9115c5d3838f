"""Acceptance suite: one criterion per test, one printed pass/fail line each.

Run with `pytest -s tests/test_acceptance.py` to see the status lines on
passing runs (pytest shows captured output for failures regardless).
"""

import math
import random
import time
from contextlib import contextmanager

import numpy as np
import pytest

from ictx.assign import assign_mgca
from ictx.corpus import CaptionStore, CorpusIndex, EmbeddingStore, ImageRecord, TagSet
from ictx.metric import build_df, cider_d
from ictx.pipeline import (ExperimentConfig, Stores, iterate_prompting,
                           run_grid, shortcut_probe)
from ictx.select import (SelectionSpec, cosine_topk, select_diir_tr,
                         select_diir_tt, select_siir_tag)
from ictx.vlm import GenerationRequest, StubBackend, batch_generate

from oracle_cider import oracle_cider_d


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"[acceptance] {name}: FAIL", flush=True)
        raise
    print(f"[acceptance] {name}: PASS", flush=True)


def make_tags(n, seed, universe=40):
    rng = random.Random(seed)
    pool = [f"tag{i}" for i in range(universe)]
    tags = {}
    for i in range(n):
        cats = {cat: frozenset(rng.sample(pool, rng.randint(1, 5)))
                for cat in ("objects", "classes", "attributes", "relations")}
        tags[f"i{i:03d}"] = TagSet(image_id=f"i{i:03d}", **cats)
    return tags


def test_retrieval_exactness():
    with criterion("retrieval exactness"):
        rng = np.random.RandomState(101)
        mat = rng.randn(1000, 64).astype(np.float32)
        store = EmbeddingStore(ids=[f"v{i:04d}" for i in range(1000)],
                               matrix=mat)
        queries = rng.randn(100, 64)
        # oracle: full-scan scores via a separate numpy path, python sort
        unit = mat.astype(np.float64)
        unit /= np.linalg.norm(unit, axis=1, keepdims=True)
        started = time.perf_counter()
        results = [cosine_topk(q, store, 32) for q in queries]
        elapsed = time.perf_counter() - started
        for q, got in zip(queries, results):
            sims = unit @ (q / np.linalg.norm(q))
            want = sorted(zip(store.ids, sims),
                          key=lambda t: (-t[1], t[0]))[:32]
            assert [g[0] for g in got] == [w[0] for w in want]
        assert elapsed < 2.0, f"100 queries took {elapsed:.2f}s"


def test_tag_retrieval():
    with criterion("tag retrieval"):
        tags = make_tags(201, seed=7)
        test_id = "i200"
        pool = sorted(i for i in tags if i != test_id)
        t_union = tags[test_id].union()
        for n in (4, 8, 16, 32):
            spec = SelectionSpec("siir-tag", n, pool)
            got = select_siir_tag(spec, test_id, tags)
            want = sorted(pool,
                          key=lambda p: (-len(t_union & tags[p].union()), p))[:n]
            assert got.image_ids == want, f"n={n}"
        # constructed all-zero-similarity case: ascending id order
        zero = {f"p{i}": TagSet(f"p{i}", objects=frozenset({f"z{i}"}))
                for i in range(8)}
        zero["q"] = TagSet("q", objects=frozenset({"unshared"}))
        got = select_siir_tag(SelectionSpec("siir-tag", 4, sorted(zero)[:-1]),
                              "q", zero)
        assert got.image_ids == ["p0", "p1", "p2", "p3"]
        assert got.scores == [0.0] * 4


def test_diir_contracts():
    with criterion("DIIR contracts"):
        # diir-tt, n=8, one empty category
        tags = make_tags(60, seed=13)
        t = tags["i000"]
        tags["i000"] = TagSet("i000", objects=t.objects, classes=t.classes,
                              attributes=t.attributes, relations=frozenset())
        pool = sorted(i for i in tags if i != "i000")
        got = select_diir_tt(SelectionSpec("diir-tt", 8, pool), "i000", tags)
        assert len(got.image_ids) == 8
        assert len(set(got.image_ids)) == 8
        assert got.backfills <= 2
        # diir-tr at n=1 degenerates to siir-tag at n=1
        tags = make_tags(150, seed=17)
        rng = random.Random(19)
        queries = rng.sample(sorted(tags), 50)
        for test_id in queries:
            pool = sorted(i for i in tags if i != test_id)
            tr = select_diir_tr(SelectionSpec("diir-tr", 1, pool, seed=23),
                                test_id, tags)
            st = select_siir_tag(SelectionSpec("siir-tag", 1, pool),
                                 test_id, tags)
            assert tr.image_ids == st.image_ids


def test_metric_fidelity(cider_fixture):
    with criterion("metric fidelity"):
        table = build_df(cider_fixture["references"])
        for pair in cider_fixture["pairs"]:
            got = cider_d(pair["candidate"], pair["refs"], table)
            assert got.value == pytest.approx(pair["expected"], abs=1e-4)
        zero = cider_d("entirely unknown tokens here",
                       ["a dog runs in the park"], table)
        assert zero.value == 0.0


def test_mgca_correctness():
    with criterion("MGCA correctness"):
        rng = random.Random(31)
        vocab = [f"w{i}" for i in range(30)]
        records = []
        for i in range(20):
            caps = tuple(" ".join(rng.sample(vocab, 6)) + f" uniq{i}g{j}"
                         for j in range(5))
            records.append(ImageRecord(f"m{i:02d}", "train", caps))
        corpus = CorpusIndex(records)
        table = build_df({r.image_id: list(r.captions) for r in records})
        df = {k: float(v) for k, v in table.df.items()}
        ids = [r.image_id for r in records]
        # anchor == GTC_j implies selection j
        anchors = {r.image_id: r.captions[int(r.image_id[1:]) % 5]
                   for r in records}
        got = assign_mgca(ids, CaptionStore("a", anchors), corpus, table)
        for r, caption in zip(records, got):
            assert caption == r.captions[int(r.image_id[1:]) % 5]
        # generic anchors match a brute-force argmax over the oracle scorer
        anchors = {r.image_id: " ".join(rng.sample(vocab, 5)) for r in records}
        got = assign_mgca(ids, CaptionStore("a", anchors), corpus, table)
        for r, caption in zip(records, got):
            scores = [oracle_cider_d(anchors[r.image_id], [g], df,
                                     table.num_docs) for g in r.captions]
            best = max(range(5), key=lambda j: (scores[j], -j))
            assert caption == r.captions[best]
        # all-zero ties select index 0
        anchors = {i: "xylophone quartz nebula" for i in ids}
        got = assign_mgca(ids, CaptionStore("a", anchors), corpus, table)
        for r, caption in zip(records, got):
            assert caption == r.captions[0]


def test_shortcut_probe_direction(world):
    with criterion("short-cut probe direction"):
        started = time.perf_counter()
        backend = StubBackend("copy-nearest", images=world.images)
        report = shortcut_probe(world, backend,
                                world.corpus.split_ids("test"), seed=5)
        c = report.conditions
        assert c["identical"]["icc_cider"] >= c["siir-clip"]["icc_cider"]
        assert c["siir-clip"]["icc_cider"] >= c["rs"]["icc_cider"]
        assert c["identical"]["gtc_cider"] <= c["rs"]["gtc_cider"]
        assert time.perf_counter() - started < 30.0


def test_iterative_prompting_convergence(world):
    with criterion("IP convergence"):
        def run():
            backend = StubBackend("copy-nearest", images=world.images)
            return iterate_prompting(world, backend, iterations=5, seed=11,
                                     n_seed_shots=8, n_shots=41,
                                     eval_shot_counts=(4,), n_eval_limit=4)

        first = run()
        changed = [r.changed for r in first.records]
        assert 0 in changed[1:5], f"no fixed point in 5 iterations: {changed}"
        assert first.to_jsonl() == run().to_jsonl()


def test_grid_integrity(world, tmp_path):
    with criterion("grid integrity"):
        def config(cache):
            return ExperimentConfig(strategies=["rs", "siir-clip"],
                                    caption_sources=["gtc", "mgc:toy"],
                                    shot_counts=[4, 8], seed=7,
                                    cache_dir=str(cache))

        def backend():
            return StubBackend("copy-nearest", images=world.images)

        report = run_grid(config(tmp_path / "c1"), world, backend())
        assert len(report.rows) == 8
        for s, c, m in report.means:
            cells = [r.cider for r in report.rows
                     if r.strategy == s and r.caption_source == c]
            assert abs(m - sum(cells) / len(cells)) < 1e-9
        # interrupt after 3 cells, resume, compare against a straight run
        run_grid(config(tmp_path / "c2"), world, backend(), max_cells=3)
        resumed = run_grid(config(tmp_path / "c2"), world, backend())
        resumed.write(tmp_path / "o1")
        report.write(tmp_path / "o2")
        for name in ("report.csv", "means.csv", "chart_data.json"):
            assert (tmp_path / "o1" / name).read_bytes() == \
                   (tmp_path / "o2" / name).read_bytes()
        # rerun against the warm cache: zero generation calls
        warm = backend()
        run_grid(config(tmp_path / "c1"), world, warm)
        assert warm.calls == 0


def test_determinism_under_parallelism(world, tmp_path):
    with criterion("determinism under parallelism"):
        # strategies are pure given (spec, stores)
        from ictx.select import select_shots
        pool = world.corpus.split_ids("train")
        kwargs = {
            "rs": {},
            "siir-clip": {"images": world.images},
            "siir-tag": {"tags": world.tags},
            "sicr-clip": {"images": world.images,
                          "caption_embeddings": world.caption_embeddings["gtc"],
                          "caption_text": world.caption_text("gtc")},
            "diir-tr": {"tags": world.tags},
            "diir-tt": {"tags": world.tags},
        }
        for strategy, kw in kwargs.items():
            spec = SelectionSpec(strategy, 8, pool, seed=3)
            a = select_shots(spec, "x00", **kw)
            b = select_shots(spec, "x00", **kw)
            assert (a.image_ids, a.scores) == (b.image_ids, b.scores)
        # batch_generate output is positional whatever the worker count
        from ictx.assign import InContextSequence
        reqs = [GenerationRequest(InContextSequence(
                    shots=((f"t00{i % 10}", f"cap{i}"),), test_image_id="x00",
                    order_policy="as-retrieved"))
                for i in range(24)]
        one = batch_generate(StubBackend("echo-last"), reqs, max_in_flight=1)
        eight = batch_generate(StubBackend("echo-last"), reqs, max_in_flight=8)
        assert [r.caption for r in one] == [r.caption for r in eight]
        # grid results invariant in max_in_flight
        rows = {}
        for workers in (1, 8):
            cfg = ExperimentConfig(strategies=["rs", "siir-clip"],
                                   caption_sources=["gtc"], shot_counts=[4, 8],
                                   seed=7, max_in_flight=workers)
            rep = run_grid(cfg, world,
                           StubBackend("copy-nearest", images=world.images))
            rows[workers] = [(r.strategy, r.caption_source, r.shots, r.cider)
                             for r in rep.rows]
        assert rows[1] == rows[8]
