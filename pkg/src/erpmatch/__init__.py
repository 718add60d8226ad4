"""Dense two-view matching and relative pose for equirectangular panoramas."""

__version__ = "0.1.0"

from .errors import DataError, ErpMatchError, NumericalError  # noqa: E402
from .frame import DepthMap, ErpImage, Frame, MatchField, PoseSE3  # noqa: E402
from .sphere import ErpGridSpec  # noqa: E402

__all__ = [
    "DataError",
    "DepthMap",
    "ErpGridSpec",
    "ErpImage",
    "ErpMatchError",
    "Frame",
    "MatchField",
    "NumericalError",
    "PoseSE3",
    "__version__",
]
