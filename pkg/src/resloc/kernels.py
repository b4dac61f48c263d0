"""Hot numerical kernels.

The compiled extension is used when it has been built; otherwise the
pure-Python implementation is selected. Set ``RESLOC_PURE_PYTHON=1`` to force
the fallback.
"""
import os
from types import SimpleNamespace

from ._ext import _filterkernel_py, _pbkernel_py

python_backend = SimpleNamespace(
    pb_quantile=_pbkernel_py.pb_quantile,
    window_violations=_pbkernel_py.window_violations,
    predict_joint=_filterkernel_py.predict_joint,
    measurement_model=_filterkernel_py.measurement_model,
    joseph_update=_filterkernel_py.joseph_update,
    spd_inverse=_filterkernel_py.spd_inverse,
)

compiled_backend = None
if not os.environ.get("RESLOC_PURE_PYTHON"):
    try:
        from ._ext import _filterkernel, _pbkernel
    except ImportError:  # extension not built
        compiled_backend = None
    else:
        compiled_backend = SimpleNamespace(
            pb_quantile=_pbkernel.pb_quantile,
            window_violations=_pbkernel.window_violations,
            predict_joint=_filterkernel.predict_joint,
            measurement_model=_filterkernel.measurement_model,
            joseph_update=_filterkernel.joseph_update,
            spd_inverse=_filterkernel.spd_inverse,
        )

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

pb_quantile = _impl.pb_quantile
window_violations = _impl.window_violations
predict_joint = _impl.predict_joint
measurement_model = _impl.measurement_model
joseph_update = _impl.joseph_update
spd_inverse = _impl.spd_inverse
