"""Block-scaled quantization laboratory."""

try:
    from ._core import *  # noqa: F401,F403  (installed package layout)
except ImportError:  # build-tree layout: _core sits next to the package dir
    from _core import *  # noqa: F401,F403
