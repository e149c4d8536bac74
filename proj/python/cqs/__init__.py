"""Query-based adaptive aggregation for place-recognition descriptors.

Thin wrapper over the C++ core. The heavy lifting (attention stages,
cross-query similarity, Sinkhorn normalization, coding-rate analysis,
retrieval evaluation) lives in the `_cqs` extension module.
"""

from ._cqs import *  # noqa: F401,F403
from ._cqs import __version__  # noqa: F401
