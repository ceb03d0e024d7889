"""Integration tests driving the lab commands end to end."""
