"""Simulation and evaluation harness for LLM agents playing tabletop role-playing sessions."""

__version__ = "0.1.0"
