"""Curvature-varying Riemannian embeddings for temporal graphs, trained self-supervised.

Modules: ``tensor`` (autodiff arrays), ``manifold`` (constant-curvature geometry),
``timeenc`` (time encodings), ``curvature`` (learned and Ricci curvature),
``rgnn`` (temporal attention encoder), ``ssl`` (contrastive training),
``eval`` (downstream protocols), ``data`` (graphs, splits, generators) and
``cli`` (command line).
"""

__version__ = "0.1.0"
