"""Experiment orchestration: configs, image-set workspace, commands, CSV reports."""
