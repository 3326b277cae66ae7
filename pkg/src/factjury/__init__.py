"""factjury: key-fact evaluation of generated clinical summaries.

Subpackages cover the full workflow: corpus ingestion and persistence,
model-provider plumbing, key-fact benchmark curation, two summary
generation strategies (single-prompt and the iterative provenance-tagged
workflow), jury evaluation by majority vote, agreement meta-statistics,
and HTML/JSON report rendering.
"""

__version__ = "0.1.0"

SCHEMA_VERSION = "1.0"
