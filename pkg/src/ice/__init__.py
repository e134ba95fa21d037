"""Instrument-computing ecosystem control plane.

Two channels, both policy-gated: a control channel that steers exposed
instrument objects through a name registry, and a data channel that
mirrors acquired measurement files to remote compute stores.
"""

__version__ = "0.1.0"

from .client import Proxy  # noqa: F401
from .instrument import MicroscopeSimulator, ProbePosition, ScanParameters  # noqa: F401
from .policy import PolicyEngine  # noqa: F401
from .wire import ErrorInfo, IceError, Message  # noqa: F401
