"""Tests package for nutriscreen."""
