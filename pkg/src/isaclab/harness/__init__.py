"""Experiment orchestration and the command line interface."""
