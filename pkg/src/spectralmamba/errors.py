"""Exception types raised across the package.

Each class carries a short ``kind`` tag used by the command-line front end
to emit ``ERR:<kind>:`` prefixed messages.
"""


class SpectralMambaError(Exception):
    kind = "error"


class DimensionError(SpectralMambaError, ValueError):
    kind = "dimension"


class NumericError(SpectralMambaError, FloatingPointError):
    kind = "numeric"


class ConfigError(SpectralMambaError, ValueError):
    kind = "config"


class ContractError(SpectralMambaError, RuntimeError):
    kind = "contract"


class FormatError(SpectralMambaError, ValueError):
    kind = "format"


class SplitError(SpectralMambaError, ValueError):
    kind = "split"


class TargetIndexError(SpectralMambaError, IndexError):
    kind = "index"
