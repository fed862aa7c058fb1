"""Test suite for esforge."""
