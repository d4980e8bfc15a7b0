"""Feature generation for irregularly sampled event records, driven by LLM-written programs."""

__version__ = "0.1.0"
