"""Datasets, configuration and report files."""
