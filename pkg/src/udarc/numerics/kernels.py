"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
implementation is used. Set ``UDARC_KERNELS=python`` to force the fallback
(``native`` makes a missing extension an import error).
"""
import os
from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def get_backend(name: str) -> ModuleType:
    if name == "python":
        return _pykernels
    if name == "native":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r} (expected 'python' or 'native')")


def available_backends() -> list[str]:
    return ["python"] + (["native"] if _ckernels is not None else [])


_requested = os.environ.get("UDARC_KERNELS", "").strip().lower()
if _requested:
    impl = get_backend(_requested)
else:
    impl = _ckernels if _ckernels is not None else _pykernels

BACKEND = "native" if impl is _ckernels and _ckernels is not None else "python"

softmax_forward = impl.softmax_forward
softmax_backward = impl.softmax_backward
layer_norm_forward = impl.layer_norm_forward
layer_norm_backward = impl.layer_norm_backward
gelu_forward = impl.gelu_forward
gelu_backward = impl.gelu_backward
best_span = impl.best_span
