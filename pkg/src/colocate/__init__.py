"""Locating cipher executions in random-delay power traces with a 1D residual CNN.

Modules: ``trace`` (containers and files), ``synth`` (leakage simulator),
``dataset``, ``autograd`` and ``model`` (the classifier), ``locator``
(sliding-window segmentation), ``cpa`` (key recovery) and ``cli``.
"""

__version__ = "0.1.0"
