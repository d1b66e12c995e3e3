"""Binary and ternary weight quantization of small networks with ADMM."""
from .admm import AdmmConfig, RhoSchedule, run_admm
from .nn import Model, lenet5, mlp
from .progressive import ProgressiveConfig, run_progressive
from .quantizer import QuantScheme, project_optimal

__version__ = "0.1.0"

__all__ = [
    "AdmmConfig",
    "Model",
    "ProgressiveConfig",
    "QuantScheme",
    "RhoSchedule",
    "lenet5",
    "mlp",
    "project_optimal",
    "run_admm",
    "run_progressive",
]
