"""
Tests for the LipField backend.
"""
