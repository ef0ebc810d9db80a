"""Evaluation cell store and stage-run log (async SQLAlchemy)."""
