"""Active domain adaptation with stochastic adversarial gradient embeddings (SAGE)."""

from .errors import ContractViolation, NumericError

__version__ = "0.1.0"

__all__ = ["ContractViolation", "NumericError", "__version__"]
