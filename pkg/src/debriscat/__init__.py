"""Simulator and orbit-determination library for optical surveillance of high-LEO debris."""

__version__ = "0.1.0"
