"""Generation and transmission expansion co-optimization engine.

Investment decisions (which projects to build, and when) are chosen by a
master binary program; each trial plan is priced by a stochastic hydrothermal
operation model solved with dual dynamic programming, and the two exchange
linear cuts until the cost bounds meet.
"""

from gtplan.errors import CaseError, DataError, GtplanError

__all__ = ["GtplanError", "DataError", "CaseError"]

__version__ = "0.1.0"
