"""
Decomposed SVS Test Suite

Tests for the feature, model, inpainting and pipeline stages.
"""
