"""Taxonomy-guided group-contrastive class-incremental learning.

Modules, bottom-up: ``taxonomy`` (label trees, registry), ``memory``
(per-class Gaussian mixtures), ``relation`` (Wasserstein class relations),
``losses``, ``model`` (frozen trunk + adapters + heads), ``trainer``,
``inference`` (group-aware prediction), ``metrics`` and the harness
(``config``, ``data``, ``experiment``, ``sweep``, ``cli``).
"""

__version__ = "0.1.0"
