"""
Custom exceptions for the B3 estimation engine
"""


class B3Error(Exception):
    """Base exception for B3 estimation errors"""

    #: CLI 結束代碼（見 src/cli.py）
    exit_code: int = 1


class ConfigError(B3Error):
    """Invalid or incomplete configuration"""
    exit_code = 1


class DataError(B3Error):
    """Error related to observation data files"""
    exit_code = 2


class SchemaError(DataError):
    """Header or file layout does not match the documented schema"""
    pass


class RowRejectionError(DataError):
    """Rows were rejected and the run does not tolerate rejections"""
    pass


class BasisError(B3Error):
    """Spline basis cannot be constructed or evaluated"""
    exit_code = 2


class ModelError(B3Error):
    """Error during model assembly"""
    exit_code = 2


class RoutingError(ModelError):
    """Observation cannot be routed to a likelihood branch"""
    pass


class SamplerError(B3Error):
    """Error raised by the MCMC sampler"""
    exit_code = 3


class SamplerInitError(SamplerError):
    """Posterior is not finite at the initial state"""

    def __init__(self, message: str, block: str = ""):
        super().__init__(message)
        self.block = block

    def __reduce__(self):
        return (type(self), (str(self), self.block))


class DiagnosticsError(B3Error):
    """Convergence diagnostics failed (R-hat above threshold in strict mode)"""
    exit_code = 4


class ProjectionError(B3Error):
    """Error during spline coefficient projection"""
    exit_code = 3


class ValidationHarnessError(B3Error):
    """Error in the out-of-sample validation harness"""
    exit_code = 2


class ExportError(B3Error):
    """Error writing or reading run artifacts"""
    exit_code = 1
