"""Exception types shared across the package."""


class ScdMheError(Exception):
    """Base class for all errors raised by this package."""


class ModelError(ScdMheError):
    """Invalid model evaluation (non-finite input, singular factor, ...)."""


class CovarianceError(ScdMheError):
    """A covariance matrix is not symmetric positive definite."""


class QpError(ScdMheError):
    """Quadratic-program assembly or solve failure."""


class RankDeficiencyError(QpError):
    """KKT factorization hit a zero or near-zero pivot."""


class ConvergenceError(QpError):
    """Residual above tolerance after iterative refinement."""


class FilterError(ScdMheError):
    """Recursive filter failure (singular innovation covariance, ...)."""


class ConfigError(ScdMheError):
    """Invalid configuration file or CLI arguments."""
