"""Synthetic data, oracle comparisons, skew analysis, complexity harness and the CLI."""
