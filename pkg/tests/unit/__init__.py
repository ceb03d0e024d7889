"""Unit tests for the SAMIRO lab."""
