"""Desk-scale projection-aware dual captioning.

Composite synthesis, projection segmentation, mask-gated query encoders,
retrieval-augmented prompting, a toy caption decoder, multi-task training,
and a decoupled dual-caption evaluation protocol.
"""

__version__ = "0.1.0"
