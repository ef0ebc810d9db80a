"""Domain-adaptive pretraining toolkit for tweet corpora."""
