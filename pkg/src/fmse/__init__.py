"""Flow-matching speech enhancement."""
