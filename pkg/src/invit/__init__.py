"""Invariant nested-view transformer toolkit for TSP and CVRP."""

__version__ = "0.1.0"
