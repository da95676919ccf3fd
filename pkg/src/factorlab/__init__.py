"""Formulaic alpha factor mining toolkit."""
