"""Desk-scale laboratory for rule-based verifier rewards: symbolic scenes,
grounding-score reward compositions, gated-gradient theory checks, a toy
group-relative RL trainer, and a verify-localize-edit agent loop."""

__version__ = "0.1.0"
