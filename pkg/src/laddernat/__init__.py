"""Latent-variable non-autoregressive translation on synthetic corpora.

Modules: ``tensor`` (reverse-mode autodiff), ``blocks`` (transformer layers),
``latent`` (Gaussian sequence math), ``models`` (AT / LaNMT / LadderNMT bundles),
``data``, ``training``, ``inference``, ``analysis`` and ``cli``.
"""

from .models import KINDS, ModelBundle, param_count

__version__ = "0.1.0"
__all__ = ["KINDS", "ModelBundle", "param_count"]
