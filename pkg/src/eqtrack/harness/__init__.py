"""Experiment driver: slope fits, protocol runners, and the CSV command line."""
