"""Batch command-line front end."""
