"""Monocular model-based relative pose estimation toolkit."""
