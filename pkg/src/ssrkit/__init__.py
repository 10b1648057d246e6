"""Scaffold-specialize-reconcile training toolkit.

Submodules: ``tensor``/``autodiff``/``optim`` (numerics), ``checkpoint``
(ABM-CKPT files), ``merge`` (averaging, TSVM, WUDI), ``toy`` (synthetic
domains and staged training), ``grpo`` and ``interference``.
"""
__version__ = "0.1.0"
