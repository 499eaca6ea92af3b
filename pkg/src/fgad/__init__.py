"""Fine-grained anomaly detection for domain-shifted tabular data.

Pipeline: a reference-trained reconstruction GAN scores target instances via
an MMD-based scorer on reconstruction deviations, a style-matrix GAN adapts
target domains onto the reference, and adapted anomalies are clustered into
subtypes by self-paced attention-fused clustering.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, FgadError, NumericError

__all__ = ["ConfigError", "DataError", "FgadError", "NumericError", "__version__"]
