"""Numerical backend for the Epstein-Zin duality toolkit"""
