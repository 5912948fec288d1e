"""Command-line front end: file formats, synthetic data, config and commands."""
