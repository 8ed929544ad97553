"""Experiment harness: configuration, datasets, presets and the CLI."""
