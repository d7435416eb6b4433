"""Contrastive multimodal item representations and their use in CTR models."""
from __future__ import annotations

__version__ = "0.1.0"
