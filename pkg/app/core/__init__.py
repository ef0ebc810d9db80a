"""Pipeline stages: corpus prep, WordPiece, example shards, encoder, training and evaluation."""
