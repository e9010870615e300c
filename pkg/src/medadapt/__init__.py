"""Toolkit for adapting a general LLM to medical multi-choice QA.

Submodules:

- ``corpus``: PubMedQA-format loading, statistics, splits, triplet verbalization
- ``glm_prep``: blank-filling example construction (compiled kernels with a Python fallback)
- ``backend``: completion/scoring clients (HTTP chat-completion and scripted mock)
- ``prompting``: Direct / CoT / CoVe / Verification-of-Choice pipelines
- ``ppl_ranker``: minimum-perplexity option selection
- ``annotator``: pseudo-labeling of unlabeled records
- ``cpoly``: low-rank adapter mixture numerics and gradient checks
- ``evalharness``: scoring, reports, stage training recipes
- ``cli``: the ``medadapt`` command
"""

__version__ = "0.1.0"
