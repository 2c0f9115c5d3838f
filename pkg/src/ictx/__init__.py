"""ictx: configuration engine and experiment harness for multimodal
in-context captioning.

Subpackages cover corpus ingestion, a consensus captioning metric,
shot-selection strategies, caption assignment, a generation-protocol
client with deterministic stubs, and an experiment pipeline.
"""

__version__ = "0.1.0"
