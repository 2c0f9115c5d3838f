import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ictx.metric import (DocFreqTable, MetricError, build_df, cider_d,
                         corpus_cider, ngram_counts, tokenize)
from oracle_cider import oracle_build_df, oracle_cider_d


class TestTokenize:
    @pytest.mark.parametrize("text,expected", [
        ("A dog, running!", ["a", "dog", "running"]),
        ("", []),
        ("MAN holds 2 bats.", ["man", "holds", "2", "bats"]),
        ("tab\tand\nnewline", ["tab", "and", "newline"]),
    ])
    def test_examples(self, text, expected):
        assert tokenize(text) == expected


class TestBuildDf:
    def test_direct_counts(self):
        table = build_df({"i1": ["a dog"], "i2": ["a cat"]})
        assert table.df[("a",)] == 2
        assert table.df[("dog",)] == 1
        assert table.num_docs == 2

    def test_single_doc_all_ones(self):
        table = build_df({"i1": ["a dog runs", "a dog sits"]})
        assert set(table.df.values()) == {1}

    def test_empty_map_rejected(self):
        with pytest.raises(MetricError):
            build_df({})

    def test_matches_brute_force_oracle(self, cider_fixture):
        refs = cider_fixture["references"]
        table = build_df(refs)
        oracle_df, oracle_n = oracle_build_df(refs)
        assert table.num_docs == oracle_n
        assert table.df == {g: int(c) for g, c in oracle_df.items()}

    def test_export_round_trip(self, cider_fixture, tmp_path):
        table = build_df(cider_fixture["references"])
        table.save(tmp_path / "dftable.json")
        again = DocFreqTable.load(tmp_path / "dftable.json")
        assert again.df == table.df and again.num_docs == table.num_docs


class TestCiderD:
    def test_zero_overlap_is_zero(self, cider_fixture):
        table = build_df(cider_fixture["references"])
        score = cider_d("xylophone quartz", ["a dog runs in the park"], table)
        assert score.value == 0.0
        assert score.per_n == (0.0, 0.0, 0.0, 0.0)

    def test_identical_unique_candidate_maximal(self):
        cap = "purple zebra gliding over quartz dunes"
        table = build_df({"i1": [cap], "i2": ["a dog"]})
        exact = cider_d(cap, [cap], table)
        # unique n-grams, identical pair: each component maximal, value = 10
        assert exact.value == pytest.approx(10.0)
        other = cider_d("purple zebra gliding", [cap], table)
        assert other.value < exact.value

    def test_value_is_mean_of_components(self, cider_fixture):
        table = build_df(cider_fixture["references"])
        p = cider_fixture["pairs"][7]
        score = cider_d(p["candidate"], p["refs"], table)
        assert score.value == pytest.approx(sum(score.per_n) / 4 * 10, abs=1e-12)

    def test_fixture_suite_matches_oracle(self, cider_fixture):
        table = build_df(cider_fixture["references"])
        for p in cider_fixture["pairs"]:
            got = cider_d(p["candidate"], p["refs"], table).value
            assert got == pytest.approx(p["expected"], abs=1e-4), p["image_id"]

    def test_no_refs_rejected(self, cider_fixture):
        table = build_df(cider_fixture["references"])
        with pytest.raises(MetricError):
            cider_d("a dog", [], table)

    def test_reference_permutation_symmetry(self, cider_fixture):
        table = build_df(cider_fixture["references"])
        p = cider_fixture["pairs"][3]
        a = cider_d(p["candidate"], p["refs"], table).value
        b = cider_d(p["candidate"], list(reversed(p["refs"])), table).value
        assert a == pytest.approx(b, abs=1e-12)

    def test_casing_punctuation_invariance(self, cider_fixture):
        table = build_df(cider_fixture["references"])
        p = cider_fixture["pairs"][0]
        noisy = p["candidate"].upper().replace(" ", ", ") + "!!"
        a = cider_d(p["candidate"], p["refs"], table).value
        b = cider_d(noisy, p["refs"], table).value
        assert a == pytest.approx(b, abs=1e-12)

    def test_unrelated_doc_never_lowers_idf(self, cider_fixture):
        table = build_df(cider_fixture["references"])
        grown = dict(cider_fixture["references"])
        grown["extra"] = ["qq ww ee rr"]
        bigger = build_df(grown)
        for gram in [("man",), ("dog",), ("park", "bench")]:
            if gram in table.df:
                assert bigger.idf(gram) >= table.idf(gram)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from("dog cat man park red runs sits the a".split()),
                min_size=1, max_size=10))
def test_ngram_counts_total(tokens):
    counts = ngram_counts(tokens)
    # for each n, total count equals max(len - n + 1, 0)
    for n in range(1, 5):
        total = sum(c for g, c in counts.items() if len(g) == n)
        assert total == max(len(tokens) - n + 1, 0)


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(5))))
def test_cider_ref_permutation_property(perm):
    refs = ["a dog runs", "a dog sits", "the cat naps", "a man walks", "red bus"]
    table = build_df({"i": refs, "j": ["the man holds a bat"]})
    base = cider_d("a dog runs fast", refs, table).value
    shuffled = cider_d("a dog runs fast", [refs[i] for i in perm], table).value
    assert shuffled == pytest.approx(base, abs=1e-12)


class TestCorpusCider:
    def test_mean_definition(self, cider_fixture):
        table = build_df(cider_fixture["references"])
        pairs = cider_fixture["pairs"][:10]
        candidates = {p["image_id"]: p["candidate"] for p in pairs}
        refs = {p["image_id"]: p["refs"] for p in pairs}
        got = corpus_cider(candidates, refs, table)
        expected = sum(cider_d(p["candidate"], p["refs"], table).value
                       for p in pairs) / len(pairs) * 100.0
        assert got == pytest.approx(expected, abs=1e-9)

    def test_zero_overlap_single_image(self):
        table = build_df({"i": ["a dog runs"], "j": ["the cat"]})
        assert corpus_cider({"i": "xyzzy plugh"}, {"i": ["a dog runs"]}, table) == 0.0

    def test_exact_match_mean_of_maxima(self, cider_fixture):
        table = build_df(cider_fixture["references"])
        pairs = cider_fixture["pairs"][:8]
        candidates = {p["image_id"]: p["refs"][0] for p in pairs}
        refs = {p["image_id"]: p["refs"] for p in pairs}
        got = corpus_cider(candidates, refs, table)
        expected = sum(oracle_cider_d(p["refs"][0], p["refs"],
                                      {g: float(c) for g, c in table.df.items()},
                                      table.num_docs)
                       for p in pairs) / len(pairs) * 100.0
        assert got == pytest.approx(expected, abs=1e-6)

    def test_unknown_image_rejected(self):
        table = build_df({"i": ["a dog"]})
        with pytest.raises(MetricError, match="unknown image"):
            corpus_cider({"zz": "a dog"}, {"i": ["a dog"]}, table)
