"""Contrastive pretraining and few-shot land-cover classification for PolSAR.

The package covers the full desk-scale pipeline: scattering-matrix algebra
and synthetic complex-Wishart scenes (:mod:`polsarcl.sar`), target
decomposition features (:mod:`polsarcl.decomposition`), SLIC superpixels
(:mod:`polsarcl.superpixel`), beam-search feature filtering
(:mod:`polsarcl.feature_filter`), a minimal reverse-mode autodiff with the
required layers (:mod:`polsarcl.autodiff`, :mod:`polsarcl.nn`), the
dual-branch contrastive trainer (:mod:`polsarcl.contrastive`,
:mod:`polsarcl.training`), evaluation metrics (:mod:`polsarcl.metrics`)
and a command-line interface (:mod:`polsarcl.cli`).
"""

__version__ = "0.1.0"
