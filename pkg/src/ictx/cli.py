"""Operator surface: `ictx` subcommands wiring the modules into
reproducible runs.

Exit codes: 0 success, 1 validation error, 2 runtime/backend error.
All randomness flows from --seed; flags override config-file keys.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import assign as assign_mod
from . import corpus as corpus_mod
from . import metric as metric_mod
from . import pipeline as pipeline_mod
from . import select as select_mod
from . import vlm as vlm_mod

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _parse_kv(values: tuple[str, ...], flag: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for v in values:
        name, sep, path = v.partition("=")
        if not sep or not name or not path:
            raise click.UsageError(f"{flag} expects <source>=<path>, got {v!r}")
        out[name] = path
    return out


_STORE_OPTIONS = [
    click.option("--corpus", "corpus_path", type=click.Path(exists=True),
                 required=True, help="manifest.jsonl path."),
    click.option("--embeddings", "embeddings_path", type=click.Path(exists=True),
                 default=None, help="Image embeddings .bin (sidecar derived)."),
    click.option("--tags", "tags_path", type=click.Path(exists=True),
                 default=None, help="tags.jsonl path."),
    click.option("--captions", "caption_paths", multiple=True,
                 help="Caption store as <source>=<path>; repeatable."),
    click.option("--caption-embeddings", "caption_embedding_paths", multiple=True,
                 help="Caption embeddings as <source>=<path.bin>; repeatable."),
]


def store_options(fn):
    for opt in reversed(_STORE_OPTIONS):
        fn = opt(fn)
    return fn


def load_stores(corpus_path, embeddings_path, tags_path, caption_paths,
                caption_embedding_paths, train_split="train") -> pipeline_mod.Stores:
    corpus = corpus_mod.load_manifest(corpus_path)
    images = None
    if embeddings_path:
        images = corpus_mod.load_embeddings(embeddings_path, kind="image")
    tags = corpus_mod.load_tags(tags_path) if tags_path else None
    caption_stores = {
        source: corpus_mod.load_captions(path, source=source)
        for source, path in _parse_kv(caption_paths, "--captions").items()
    }
    caption_embeddings = {}
    for source, path in _parse_kv(caption_embedding_paths,
                                  "--caption-embeddings").items():
        store = corpus_mod.load_embeddings(path, kind="caption")
        store.validate_caption_ids(corpus)
        caption_embeddings[source] = store
    return pipeline_mod.Stores(corpus=corpus, images=images, tags=tags,
                               caption_stores=caption_stores,
                               caption_embeddings=caption_embeddings,
                               train_split=train_split)


def run_guarded(fn):
    """Map exception families onto the documented exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            fn(*args, **kwargs)
        except (vlm_mod.TransportError, vlm_mod.BackendError,
                vlm_mod.BatchError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)
        except (corpus_mod.CorpusError, select_mod.SelectionError,
                assign_mod.AssignError, metric_mod.MetricError,
                pipeline_mod.PipelineError, vlm_mod.VlmError,
                FileNotFoundError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
    return wrapper


@click.group()
@click.version_option()
def main():
    """Experiment harness for multimodal in-context captioning."""


@main.command("validate")
@store_options
@click.option("--strategy", "strategies", multiple=True,
              help="Strategies to check store dependencies for.")
@run_guarded
def cmd_validate(corpus_path, embeddings_path, tags_path, caption_paths,
                 caption_embedding_paths, strategies):
    """Load all stores and print counts and invariant-check results."""
    stores = load_stores(corpus_path, embeddings_path, tags_path,
                         caption_paths, caption_embedding_paths)
    counts = stores.corpus.split_counts()
    click.echo(f"manifest: {len(stores.corpus)} images "
               f"({', '.join(f'{s}:{n}' for s, n in counts.items())})")
    if stores.images is not None:
        click.echo(f"image embeddings: {len(stores.images.ids)} x {stores.images.dim}")
    if stores.tags is not None:
        click.echo(f"tags: {len(stores.tags)} images")
    for source, store in sorted(stores.caption_stores.items()):
        click.echo(f"captions[{source}]: {len(store)} entries")
    for source, store in sorted(stores.caption_embeddings.items()):
        click.echo(f"caption embeddings[{source}]: {len(store.ids)} x {store.dim}")
    for strategy in strategies:
        if strategy in ("siir-tag", "diir-tr", "diir-tt") and stores.tags is None:
            raise corpus_mod.CorpusError(f"strategy {strategy!r} requires --tags")
        if strategy in ("siir-clip", "sicr-clip") and stores.images is None:
            raise corpus_mod.CorpusError(f"strategy {strategy!r} requires --embeddings")
        if strategy == "sicr-clip" and not stores.caption_embeddings:
            raise corpus_mod.CorpusError(
                "strategy 'sicr-clip' requires --caption-embeddings")
    click.echo("ok")


@main.command("select")
@store_options
@click.option("--strategy", required=True,
              type=click.Choice(select_mod.STRATEGIES))
@click.option("--n", "n_shots", type=int, required=True)
@click.option("--test-id", required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--split", default="train", show_default=True,
              help="Candidate pool split.")
@click.option("--caption-source", default="gtc", show_default=True,
              help="SICR mediator caption source.")
@run_guarded
def cmd_select(corpus_path, embeddings_path, tags_path, caption_paths,
               caption_embedding_paths, strategy, n_shots, test_id, seed,
               split, caption_source):
    """Run one selection strategy and print the shot set as JSON."""
    stores = load_stores(corpus_path, embeddings_path, tags_path,
                         caption_paths, caption_embedding_paths)
    pool = corpus_mod.candidate_pool(stores.corpus, split, test_id)
    spec = select_mod.SelectionSpec(strategy=strategy, n_shots=n_shots,
                                    pool=pool, seed=seed,
                                    caption_source=caption_source)
    kwargs = {"images": stores.images, "tags": stores.tags}
    if strategy == "sicr-clip":
        if caption_source not in stores.caption_embeddings:
            raise select_mod.SelectionError(
                f"no caption embeddings loaded for source {caption_source!r}")
        kwargs["caption_embeddings"] = stores.caption_embeddings[caption_source]
        kwargs["caption_text"] = stores.caption_text(caption_source)
    shot_set = select_mod.select_shots(spec, test_id, **kwargs)
    click.echo(json.dumps(shot_set.to_json(), indent=2))


@main.command("assign")
@store_options
@click.option("--caption-source", required=True)
@click.argument("image_ids", nargs=-1, required=True)
@run_guarded
def cmd_assign(corpus_path, embeddings_path, tags_path, caption_paths,
               caption_embedding_paths, caption_source, image_ids):
    """Resolve captions for IMAGE_IDS under a caption source label."""
    stores = load_stores(corpus_path, embeddings_path, tags_path,
                         caption_paths, caption_embedding_paths)
    table = stores.df() if caption_source.startswith("mgca:") else None
    captions = assign_mod.assign_captions(
        list(image_ids), caption_source, corpus=stores.corpus,
        stores=stores.caption_stores, table=table)
    click.echo(json.dumps(
        [{"image_id": i, "caption": c} for i, c in zip(image_ids, captions)],
        indent=2))


def _backend_from_flags(config, stores, stub, endpoint):
    if stub:
        config.stub, config.endpoint = stub, None
    if endpoint:
        config.endpoint, config.stub = endpoint, None
    return vlm_mod.make_backend(config.endpoint, config.stub,
                                images=stores.images, tags=stores.tags)


@main.command("run")
@store_options
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True, help="Grid config (TOML).")
@click.option("--stub", type=click.Choice(vlm_mod.STUB_MODES), default=None)
@click.option("--endpoint", default=None)
@click.option("--seed", type=int, default=None, help="Override config seed.")
@click.option("--order-policy", default=None,
              type=click.Choice(assign_mod.ORDER_POLICIES))
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--cache-dir", default=None, type=click.Path())
@run_guarded
def cmd_run(corpus_path, embeddings_path, tags_path, caption_paths,
            caption_embedding_paths, config_path, stub, endpoint, seed,
            order_policy, out_dir, cache_dir):
    """Run the experiment grid and write report.csv / means.csv /
    chart_data.json under --out."""
    config = pipeline_mod.ExperimentConfig.from_toml(config_path)
    if seed is not None:
        config.seed = seed
    if order_policy is not None:
        config.order_policy = order_policy
    if cache_dir is not None:
        config.cache_dir = cache_dir
    stores = load_stores(corpus_path, embeddings_path, tags_path,
                         caption_paths, caption_embedding_paths,
                         train_split=config.train_split)
    backend = _backend_from_flags(config, stores, stub, endpoint)
    report = pipeline_mod.run_grid(config, stores, backend)
    report.write(out_dir)
    failed = [r for r in report.rows if r.cider is None]
    click.echo(f"{len(report.rows)} cells ({len(failed)} failed) -> {out_dir}")
    if failed:
        for r in failed:
            click.echo(f"failed cell {r.strategy}/{r.caption_source}/{r.shots}: "
                       f"{r.error}", err=True)
        sys.exit(EXIT_RUNTIME)


@main.command("iterate")
@store_options
@click.option("--iterations", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n-seed-shots", type=int, default=32, show_default=True)
@click.option("--n-shots", type=int, default=32, show_default=True)
@click.option("--eval-shots", default="4,8,16,32", show_default=True,
              help="Comma-separated shot counts for per-iteration evaluation.")
@click.option("--stub", type=click.Choice(vlm_mod.STUB_MODES), default=None)
@click.option("--endpoint", default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@run_guarded
def cmd_iterate(corpus_path, embeddings_path, tags_path, caption_paths,
                caption_embedding_paths, iterations, seed, n_seed_shots,
                n_shots, eval_shots, stub, endpoint, out_dir):
    """Run iterative prompting; writes trace.jsonl and the final captions."""
    stores = load_stores(corpus_path, embeddings_path, tags_path,
                         caption_paths, caption_embedding_paths)
    backend = vlm_mod.make_backend(endpoint, stub, images=stores.images,
                                   tags=stores.tags)
    counts = [int(x) for x in eval_shots.split(",") if x]
    trace = pipeline_mod.iterate_prompting(
        stores, backend, iterations, seed, n_seed_shots=n_seed_shots,
        n_shots=n_shots, eval_shot_counts=counts)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.jsonl").write_text(trace.to_jsonl())
    trace.final_store.save(out / "captions.final.jsonl")
    for r in trace.records:
        click.echo(f"iter {r.iteration}: cider={r.cider:.2f} changed={r.changed}")


@main.command("probe")
@store_options
@click.option("--n-tests", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--split", default="test", show_default=True)
@click.option("--stub", type=click.Choice(vlm_mod.STUB_MODES), default=None)
@click.option("--endpoint", default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@run_guarded
def cmd_probe(corpus_path, embeddings_path, tags_path, caption_paths,
              caption_embedding_paths, n_tests, seed, split, stub, endpoint,
              out_dir):
    """Run the short-cut probe and write probe.json."""
    stores = load_stores(corpus_path, embeddings_path, tags_path,
                         caption_paths, caption_embedding_paths)
    backend = vlm_mod.make_backend(endpoint, stub, images=stores.images,
                                   tags=stores.tags)
    test_ids = stores.corpus.split_ids(split)[:n_tests]
    report = pipeline_mod.shortcut_probe(stores, backend, test_ids, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe.json").write_text(json.dumps(report.to_json(), indent=2))
    for cond, scores in report.conditions.items():
        click.echo(f"{cond}: gtc={scores['gtc_cider']:.2f} "
                   f"icc={scores['icc_cider']:.2f}")


@main.command("report")
@click.option("--report", "report_path", type=click.Path(exists=True),
              required=True, help="Existing report.csv.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@run_guarded
def cmd_report(report_path, out_dir):
    """Recompute means.csv and chart_data.json from a report.csv."""
    import csv as _csv
    rows = []
    with open(report_path) as f:
        for row in _csv.DictReader(f):
            cider = float(row["cider"]) if row["cider"] else None
            rows.append(pipeline_mod.EvalRow(
                row["strategy"], row["caption_source"], int(row["shots"]), cider))
    report = pipeline_mod.EvalReport.from_rows(rows)
    report.write(out_dir)
    click.echo(f"wrote means for {len(report.means)} configurations -> {out_dir}")


if __name__ == "__main__":
    main()
