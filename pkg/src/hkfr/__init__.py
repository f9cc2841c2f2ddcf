"""Batch pipeline turning mixed user behavior logs into LLM recommendations.

Stages: behavior ingestion -> templated text -> knowledge fusion ->
instruction dataset -> inference -> HR/NDCG evaluation.
"""

__version__ = "0.1.0"
