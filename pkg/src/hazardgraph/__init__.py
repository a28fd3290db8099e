"""Workplace hazard scenes from injury narratives, scored with scene-graph VQA.

Submodules: ``ingest`` (CSV parsing), ``gateway`` (model backends),
``classify`` (hazard triage), ``cluster`` (HDBSCAN archetypes),
``scenegraph`` (graphs, prompts, assertions), ``scoring`` (graph score and
baselines), ``analysis`` (entropy, shuffles, tables) and ``pipeline``
(staged CLI).
"""

__version__ = "0.1.0"
