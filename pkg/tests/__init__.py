"""Tests for slimkws."""
