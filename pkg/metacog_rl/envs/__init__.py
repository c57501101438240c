"""Simulated plants and scenarios."""
