"""Object-aware distillation pyramid mechanisms at desk scale.

Proposal squaring, [OBJ]-token masked encoding, the three-level L1
distillation losses, calibrated open-vocabulary scoring and pseudo-label
generation, on top of small numpy kernels.
"""

from oadp.errors import OADPError

__version__ = "0.1.0"

__all__ = ["OADPError", "__version__"]
