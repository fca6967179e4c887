"""courselab: a desk-scale laboratory for ML-powered course allocation.

Synthetic student economies, a base-value/adjustment reporting language with a
calibrated mistake model, monotone value networks trained on mixed
cardinal/ordinal data, comparison-query elicitation, market-clearing price
search, and a batch experiment harness plus HTTP service on top.
"""

__version__ = "0.1.0"
