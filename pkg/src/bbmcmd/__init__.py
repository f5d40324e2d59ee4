"""Consistent maximal displacement of slightly subcritical branching Brownian motion.

Submodules: ``curves`` (barrier curves and their inverses), ``density``
(killed Brownian motion in a strip), ``simulator`` (Monte Carlo engine),
``experiments`` (numerical studies) and ``cli``.
"""
__version__ = "0.1.0"
