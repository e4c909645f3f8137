"""Binned-likelihood fitting as a service.

Layers, bottom-up: :mod:`workspace` (documents and patches), :mod:`model`
(compiled likelihood), :mod:`inference` (fits and CLs), :mod:`coordinator`
(task broker), :mod:`agent` (endpoint workers), :mod:`bench` and :mod:`cli`.
"""

__version__ = "0.1.0"
