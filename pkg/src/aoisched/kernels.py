"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise, or when
``AOISCHED_PURE_PYTHON=1`` is set, the numpy/pure-Python reference is used.
"""
import os

from . import _pykernels as python_backend

try:
    if os.environ.get("AOISCHED_PURE_PYTHON"):
        raise ImportError("pure-Python backend forced")
    from . import _ckernels as _active
    compiled_backend = _active
except ImportError:
    _active = python_backend
    compiled_backend = None

BACKEND = _active.BACKEND
bellman_sweep = _active.bellman_sweep
run_segment = _active.run_segment
run_sarsa = _active.run_sarsa

TABLE = python_backend.TABLE
WHITTLE = python_backend.WHITTLE
GREEDY = python_backend.GREEDY
ROUND_ROBIN = python_backend.ROUND_ROBIN
IDLE_RULE = python_backend.IDLE_RULE
NO_FEEDBACK = python_backend.NO_FEEDBACK
ACK = python_backend.ACK
NACK = python_backend.NACK
