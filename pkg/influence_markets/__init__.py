"""Exact equilibrium tools for exchange markets with social influence."""
