"""Experiment orchestration: VLM caption bootstrapping, iterative
prompting, the selection x caption-source x shot-count grid, anchor
improvement summaries, and the short-cut probe.

Grids cache per-cell results keyed by a content hash of everything that
determines the cell outcome, so interrupted runs resume and reruns cost
zero generation calls.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .assign import InContextSequence, assign_captions, build_sequence
from .corpus import (CaptionStore, CorpusIndex, EmbeddingStore, TagSet,
                     candidate_pool)
from .metric import DocFreqTable, build_df, cider_d, corpus_cider
from .select import SelectionSpec, select_shots
from .vlm import DecodingParams, GenerationRequest, batch_generate

PROBE_CONDITIONS = ("identical", "siir-clip", "rs")
DEFAULT_SHOT_COUNTS = (4, 8, 16, 32)


class PipelineError(ValueError):
    """Raised for invalid experiment configurations."""


def derive_seed(master: int, *parts) -> int:
    """Splittable seed: stable across runs and platforms, and adding new
    (part) streams never perturbs existing draws."""
    key = json.dumps([master, *[str(p) for p in parts]]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


@dataclass
class Stores:
    """Immutable bundle of everything an experiment reads."""

    corpus: CorpusIndex
    images: EmbeddingStore | None = None
    tags: dict[str, TagSet] | None = None
    caption_stores: dict[str, CaptionStore] = field(default_factory=dict)
    caption_embeddings: dict[str, EmbeddingStore] = field(default_factory=dict)
    train_split: str = "train"
    _df: DocFreqTable | None = field(default=None, repr=False)

    def df(self) -> DocFreqTable:
        """Document frequencies over training-split ground truth, built
        once and shared by anchoring and evaluation."""
        if self._df is None:
            refs = {i: list(self.corpus.captions_of(i))
                    for i in self.corpus.split_ids(self.train_split)}
            self._df = build_df(refs)
        return self._df

    def caption_text(self, source: str):
        """Resolver for caption embedding ids '<image_id>#<k>'."""
        def lookup(caption_id: str) -> str:
            image_id, _, k = caption_id.rpartition("#")
            if source == "gtc":
                return self.corpus.captions_of(image_id)[int(k)]
            if source not in self.caption_stores:
                raise PipelineError(f"caption store {source!r} not loaded")
            return self.caption_stores[source].caption(image_id)
        return lookup


def _parse_flat_toml(text: str) -> dict:
    """Parse the flat `key = value` subset the config schema uses (strings,
    integers, and one-level arrays). Stands in for tomllib on Python 3.10."""
    def scalar(tok: str):
        tok = tok.strip()
        if len(tok) >= 2 and tok[0] in "\"'" and tok[-1] == tok[0]:
            return tok[1:-1]
        if tok in ("true", "false"):
            return tok == "true"
        try:
            return int(tok)
        except ValueError:
            pass
        try:
            return float(tok)
        except ValueError as exc:
            raise PipelineError(f"unparseable config value: {tok!r}") from exc

    data: dict = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise PipelineError(f"malformed config line: {raw!r}")
        key, value = key.strip(), value.strip()
        if value.startswith("[") and value.endswith("]"):
            inner = value[1:-1].strip()
            data[key] = [scalar(t) for t in inner.split(",")] if inner else []
        else:
            data[key] = scalar(value)
    return data


@dataclass
class ExperimentConfig:
    strategies: list[str]
    caption_sources: list[str]
    shot_counts: list[int] = field(default_factory=lambda: list(DEFAULT_SHOT_COUNTS))
    test_split: str = "test"
    train_split: str = "train"
    endpoint: str | None = None
    stub: str | None = None
    seed: int = 0
    order_policy: str = "asc-similarity"
    cache_dir: str | None = None
    sicr_mediator: str = "gtc"
    max_in_flight: int = 4
    decoding: DecodingParams = field(default_factory=DecodingParams)

    def __post_init__(self):
        if not self.shot_counts:
            raise PipelineError("shot_counts must be non-empty")
        for s in self.strategies:
            if s == "diir-tt" and any(n % 4 for n in self.shot_counts):
                raise PipelineError("diir-tt requires shot counts divisible by 4")

    @classmethod
    def from_toml(cls, path: str | Path) -> "ExperimentConfig":
        try:
            import tomllib
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except ModuleNotFoundError:
            data = _parse_flat_toml(Path(path).read_text())
        known = {"strategies", "caption_sources", "shots", "split", "endpoint",
                 "stub", "seed", "order_policy", "cache_dir", "sicr_mediator",
                 "max_in_flight", "train_split"}
        unknown = set(data) - known
        if unknown:
            raise PipelineError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            strategies=list(data["strategies"]),
            caption_sources=list(data["caption_sources"]),
            shot_counts=list(data.get("shots", DEFAULT_SHOT_COUNTS)),
            test_split=data.get("split", "test"),
            train_split=data.get("train_split", "train"),
            endpoint=data.get("endpoint"),
            stub=data.get("stub"),
            seed=int(data.get("seed", 0)),
            order_policy=data.get("order_policy", "asc-similarity"),
            cache_dir=data.get("cache_dir"),
            sicr_mediator=data.get("sicr_mediator", "gtc"),
            max_in_flight=int(data.get("max_in_flight", 4)),
        )


@dataclass
class EvalRow:
    strategy: str
    caption_source: str
    shots: int
    cider: float | None
    error: str | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow]
    means: list[tuple[str, str, float]]  # (strategy, caption_source, mean)

    @classmethod
    def from_rows(cls, rows: list[EvalRow]) -> "EvalReport":
        groups: dict[tuple[str, str], list[float]] = {}
        for row in rows:
            if row.cider is not None:
                groups.setdefault((row.strategy, row.caption_source), []).append(row.cider)
        means = [(s, c, sum(v) / len(v)) for (s, c), v in sorted(groups.items())]
        return cls(rows=rows, means=means)

    def report_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["strategy", "caption_source", "shots", "cider"])
        for r in self.rows:
            w.writerow([r.strategy, r.caption_source, r.shots,
                        "" if r.cider is None else f"{r.cider:.6f}"])
        return buf.getvalue()

    def means_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["strategy", "caption_source", "mean"])
        for s, c, m in self.means:
            w.writerow([s, c, f"{m:.6f}"])
        return buf.getvalue()

    def chart_data(self) -> dict:
        series = []
        for s, c, _ in self.means:
            points = [[r.shots, r.cider] for r in self.rows
                      if r.strategy == s and r.caption_source == c and r.cider is not None]
            series.append({"strategy": s, "caption_source": c,
                           "points": sorted(points)})
        return {"series": series}

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.report_csv())
        (out / "means.csv").write_text(self.means_csv())
        (out / "chart_data.json").write_text(json.dumps(self.chart_data(), indent=2))


def _generate_captions(stores: Stores, backend, sequences: dict[str, InContextSequence],
                       params: DecodingParams, max_in_flight: int) -> dict[str, str]:
    ids = sorted(sequences)
    requests = [GenerationRequest(sequence=sequences[i], params=params) for i in ids]
    responses = batch_generate(backend, requests, max_in_flight=max_in_flight)
    return {i: r.caption for i, r in zip(ids, responses)}


def _sequence_for(stores: Stores, config: ExperimentConfig, strategy: str,
                  source: str, shots: int, test_id: str) -> InContextSequence:
    pool = candidate_pool(stores.corpus, config.train_split, test_id)
    spec = SelectionSpec(
        strategy=strategy, n_shots=shots, pool=pool,
        seed=derive_seed(config.seed, "select", strategy, source, shots, test_id),
        caption_source=config.sicr_mediator if strategy == "sicr-clip" else None,
    )
    kwargs = {"images": stores.images, "tags": stores.tags}
    if strategy == "sicr-clip":
        med = config.sicr_mediator
        if med not in stores.caption_embeddings:
            raise PipelineError(f"no caption embeddings loaded for mediator {med!r}")
        kwargs["caption_embeddings"] = stores.caption_embeddings[med]
        kwargs["caption_text"] = stores.caption_text(med)
    shot_set = select_shots(spec, test_id, **kwargs)
    captions = assign_captions(
        shot_set.image_ids, source, corpus=stores.corpus,
        stores=stores.caption_stores, table=stores.df(),
        matched=shot_set.matched_captions)
    policy = config.order_policy
    # RS shots carry no scores; similarity ordering degrades to as-retrieved
    if policy in ("asc-similarity", "desc-similarity") and any(
            s is None for s in shot_set.scores):
        policy = "as-retrieved"
    return build_sequence(shot_set, captions, test_id, order_policy=policy,
                          seed=derive_seed(config.seed, "order", strategy, source,
                                           shots, test_id))


def _cell_key(config: ExperimentConfig, backend, strategy: str, source: str,
              shots: int) -> str:
    model_id = getattr(backend, "model_id", "unknown")
    blob = json.dumps({
        "strategy": strategy, "source": source, "shots": shots,
        "order_policy": config.order_policy, "seed": config.seed,
        "model": model_id, "split": config.test_split,
        "mediator": config.sicr_mediator,
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_grid(config: ExperimentConfig, stores: Stores, backend,
             max_cells: int | None = None) -> EvalReport:
    """Full selection x source x shot-count sweep over the test split.

    Cells are cached under config.cache_dir; failed cells are recorded and
    the grid continues. `max_cells` stops early (for resumable runs).
    """
    cache = Path(config.cache_dir) if config.cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
    test_ids = stores.corpus.split_ids(config.test_split)
    if not test_ids:
        raise PipelineError(f"empty test split {config.test_split!r}")
    rows: list[EvalRow] = []
    done = 0
    for strategy in config.strategies:
        for source in config.caption_sources:
            for shots in config.shot_counts:
                if max_cells is not None and done >= max_cells:
                    return EvalReport.from_rows(rows)
                done += 1
                key = _cell_key(config, backend, strategy, source, shots)
                cell_path = cache / f"cell-{key}.json" if cache else None
                if cell_path and cell_path.exists():
                    data = json.loads(cell_path.read_text())
                    rows.append(EvalRow(strategy, source, shots,
                                        data["cider"], data.get("error")))
                    continue
                try:
                    sequences = {t: _sequence_for(stores, config, strategy,
                                                  source, shots, t)
                                 for t in test_ids}
                    candidates = _generate_captions(
                        stores, backend, sequences, config.decoding,
                        config.max_in_flight)
                    cider = corpus_cider(candidates, stores.corpus, stores.df())
                    row = EvalRow(strategy, source, shots, cider)
                except Exception as exc:  # noqa: BLE001 - cell isolation
                    row = EvalRow(strategy, source, shots, None, error=str(exc))
                rows.append(row)
                if cell_path:
                    cell_path.write_text(json.dumps(
                        {"strategy": strategy, "source": source, "shots": shots,
                         "cider": row.cider, "error": row.error}))
    return EvalReport.from_rows(rows)


def mgca_improvement(report: EvalReport) -> dict[str, float]:
    """Per anchor source, the mean over strategies of (MGCA mean - GTC mean)."""
    means = {(s, c): m for s, c, m in report.means}
    gtc = {s: m for (s, c), m in means.items() if c == "gtc"}
    out: dict[str, float] = {}
    anchors = sorted({c for (_, c) in means if c.startswith("mgca:")})
    for anchor in anchors:
        deltas = []
        for (s, c), m in sorted(means.items()):
            if c != anchor:
                continue
            if s not in gtc:
                raise PipelineError(f"no GTC baseline for strategy {s!r}")
            deltas.append(m - gtc[s])
        if not deltas:
            raise PipelineError(f"no rows for anchor {anchor!r}")
        out[anchor] = sum(deltas) / len(deltas)
    return out


def bootstrap_mgc(stores: Stores, backend, n_seed_shots: int, seed: int,
                  params: DecodingParams | None = None,
                  max_in_flight: int = 4) -> tuple[CaptionStore, list[str]]:
    """Generate one caption per database image, prompting with a fixed
    seed pool of n ground-truth pairs (or the empty prompt for n=0).

    Returns the store (source 'vlm<N>') and the list of failed ids.
    """
    params = params or DecodingParams()
    db_ids = stores.corpus.split_ids(stores.train_split)
    if not db_ids:
        raise PipelineError(f"empty database split {stores.train_split!r}")
    if n_seed_shots > 0:
        rng_seed = derive_seed(seed, "bootstrap-pool")
        import random as _random
        pool_ids = _random.Random(rng_seed).sample(db_ids, n_seed_shots)
    else:
        pool_ids = []
    pool_pairs = [(p, stores.corpus.captions_of(p)[0]) for p in pool_ids]
    captions: dict[str, str] = {}
    failed: list[str] = []
    sequences = {}
    for image_id in db_ids:
        shots = tuple((p, c) for p, c in pool_pairs if p != image_id)
        sequences[image_id] = InContextSequence(
            shots=shots, test_image_id=image_id, order_policy="as-retrieved")
    for image_id in db_ids:
        try:
            req = GenerationRequest(sequence=sequences[image_id], params=params)
            captions[image_id] = backend.generate(req).caption
        except Exception as exc:  # noqa: BLE001 - partial store contract
            failed.append(image_id)
    return CaptionStore(f"vlm{n_seed_shots}", captions), failed


@dataclass
class IterationRecord:
    iteration: int
    store_label: str
    cider: float
    changed: int


@dataclass
class IterationTrace:
    records: list[IterationRecord]
    final_store: CaptionStore

    def to_jsonl(self) -> str:
        return "".join(json.dumps({
            "iteration": r.iteration, "store": r.store_label,
            "cider": r.cider, "changed": r.changed}) + "\n"
            for r in self.records)


def _evaluate_snapshot(stores: Stores, backend, snapshot: CaptionStore,
                       seed: int, iteration: int, shot_counts, n_eval_limit,
                       params: DecodingParams, test_split: str) -> float:
    """Mean corpus CIDEr over shot counts, prompting test images with
    RS-selected database shots captioned from the snapshot."""
    import random as _random
    test_ids = stores.corpus.split_ids(test_split)[:n_eval_limit]
    scores = []
    for n in shot_counts:
        candidates: dict[str, str] = {}
        for t in test_ids:
            pool = candidate_pool(stores.corpus, stores.train_split, t)
            pool = [p for p in pool if p in snapshot]
            rng = _random.Random(derive_seed(seed, "ip-eval", iteration, n, t))
            shot_ids = rng.sample(pool, min(n, len(pool)))
            seq = InContextSequence(
                shots=tuple((s, snapshot.caption(s)) for s in shot_ids),
                test_image_id=t, order_policy="as-retrieved")
            req = GenerationRequest(sequence=seq, params=params)
            candidates[t] = backend.generate(req).caption
        scores.append(corpus_cider(candidates, stores.corpus, stores.df()))
    return sum(scores) / len(scores)


def iterate_prompting(stores: Stores, backend, iterations: int, seed: int, *,
                      n_seed_shots: int = 32, n_shots: int = 32,
                      eval_shot_counts=DEFAULT_SHOT_COUNTS,
                      test_split: str = "test", n_eval_limit: int | None = None,
                      params: DecodingParams | None = None) -> IterationTrace:
    """Iterative prompting: iteration 1 bootstraps from a fixed seed pool;
    each later iteration re-captions the database with RS-selected shots
    carrying the previous iteration's captions."""
    import random as _random
    if iterations < 1:
        raise PipelineError("iterations must be >= 1")
    params = params or DecodingParams()
    db_ids = stores.corpus.split_ids(stores.train_split)
    records: list[IterationRecord] = []

    snapshot, failed = bootstrap_mgc(stores, backend, n_seed_shots, seed,
                                     params=params)
    cider = _evaluate_snapshot(stores, backend, snapshot, seed, 1,
                               eval_shot_counts, n_eval_limit, params, test_split)
    records.append(IterationRecord(1, "iter:1", cider, len(snapshot)))

    for t in range(2, iterations + 1):
        prev = snapshot
        captions: dict[str, str] = {}
        for image_id in db_ids:
            pool = [p for p in db_ids if p != image_id and p in prev]
            rng = _random.Random(derive_seed(seed, "ip", t, image_id))
            shot_ids = rng.sample(pool, min(n_shots, len(pool)))
            seq = InContextSequence(
                shots=tuple((s, prev.caption(s)) for s in shot_ids),
                test_image_id=image_id, order_policy="as-retrieved")
            req = GenerationRequest(sequence=seq, params=params)
            captions[image_id] = backend.generate(req).caption
        snapshot = CaptionStore(f"iter:{t}", captions)
        changed = sum(1 for i in captions
                      if i not in prev or prev.caption(i) != captions[i])
        cider = _evaluate_snapshot(stores, backend, snapshot, seed, t,
                                   eval_shot_counts, n_eval_limit, params,
                                   test_split)
        records.append(IterationRecord(t, f"iter:{t}", cider, changed))
    return IterationTrace(records=records, final_store=snapshot)


@dataclass
class ProbeReport:
    conditions: dict[str, dict[str, float]]  # condition -> {gtc_cider, icc_cider}

    def to_json(self) -> dict:
        return {"conditions": self.conditions}


def shortcut_probe(stores: Stores, backend, test_ids: list[str], seed: int,
                   params: DecodingParams | None = None) -> ProbeReport:
    """Fix 5 donor captions per test image, vary only the in-context images
    (identical / siir-clip / rs), and score generations against the test
    ground truth (gtc) and the donor captions (icc)."""
    import random as _random
    params = params or DecodingParams()
    table = stores.df()
    db_ids = stores.corpus.split_ids(stores.train_split)
    gtc_acc = {c: [] for c in PROBE_CONDITIONS}
    icc_acc = {c: [] for c in PROBE_CONDITIONS}
    for t in test_ids:
        rng = _random.Random(derive_seed(seed, "probe-donor", t))
        donor_caps = None
        candidates = [i for i in db_ids if i != t]
        rng.shuffle(candidates)
        for donor in candidates:
            caps = stores.corpus.captions_of(donor)
            if len(caps) >= 5:
                donor_caps = list(rng.sample(list(caps), 5)) if len(caps) > 5 else list(caps)
                break
        if donor_caps is None:
            raise PipelineError(f"no donor with >=5 captions for test image {t!r}")
        pool = candidate_pool(stores.corpus, stores.train_split, t)
        for condition in PROBE_CONDITIONS:
            if condition == "identical":
                shot_ids = [t] * 5
            elif condition == "siir-clip":
                spec = SelectionSpec("siir-clip", 5, pool)
                shot_ids = select_shots(spec, t, images=stores.images).image_ids
            else:
                spec = SelectionSpec("rs", 5, pool,
                                     seed=derive_seed(seed, "probe-rs", t))
                shot_ids = select_shots(spec, t).image_ids
            seq = InContextSequence(
                shots=tuple(zip(shot_ids, donor_caps)),
                test_image_id=t, order_policy="as-retrieved")
            caption = backend.generate(
                GenerationRequest(sequence=seq, params=params)).caption
            gtc_acc[condition].append(
                cider_d(caption, list(stores.corpus.captions_of(t)), table).value)
            icc_acc[condition].append(cider_d(caption, donor_caps, table).value)
    conditions = {
        c: {"gtc_cider": sum(gtc_acc[c]) / len(gtc_acc[c]) * 100.0,
            "icc_cider": sum(icc_acc[c]) / len(icc_acc[c]) * 100.0}
        for c in PROBE_CONDITIONS
    }
    return ProbeReport(conditions=conditions)
