"""Kernel backend selection.

The compiled extension is preferred; the numpy fallback is used when it
was not built. Set ``TABADV_PURE_PYTHON=1`` to force the fallback.
"""

import os

BACKEND = "python"

if os.environ.get("TABADV_PURE_PYTHON", "") not in ("", "0"):
    from tabadv._kernels_py import ensemble_apply, ensemble_shap, ensemble_sum
else:
    try:
        from tabadv._kernels import ensemble_apply, ensemble_shap, ensemble_sum

        BACKEND = "cython"
    except ImportError:  # extension not built
        from tabadv._kernels_py import ensemble_apply, ensemble_shap, ensemble_sum

__all__ = ["BACKEND", "ensemble_apply", "ensemble_shap", "ensemble_sum"]
