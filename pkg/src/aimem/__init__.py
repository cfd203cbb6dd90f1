"""Personal-memory evaluation and data toolkit.

Haystack assembly and needle injection, reasoning-in-a-haystack evaluation,
natural-language memory extraction, a summary-augmented RAG baseline,
fine-tuning data synthesis, and a small pilot benchmark runner.
"""

__version__ = "0.1.0"
