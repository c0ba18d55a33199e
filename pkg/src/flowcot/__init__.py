"""flowcot: desk-scale interleaved frame/flow world modeling."""

__version__ = "0.1.0"
