"""Hard-sample-aware metric learning for clothes-changing re-identification.

The package trains small embedding nets on synthetic cloth-change
scenarios, marks hard positive/negative pairs from identity, clothing,
and viewpoint labels, reweights pair distances accordingly inside an
aggregated triplet loss, and evaluates retrieval under cloth-changing
protocols. See the README for the module map and the CLI workflow.
"""

__version__ = "0.1.0"
