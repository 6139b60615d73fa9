"""Exception hierarchy shared across the package."""


class AttribRoiError(Exception):
    """Base class for all package errors."""


class ShapeError(AttribRoiError, ValueError):
    pass


class ConfigError(AttribRoiError, ValueError):
    pass


class NumericDomainError(AttribRoiError, ArithmeticError):
    """Raised for NaN/Inf inputs and non-normalized distributions."""


class NumericalAbort(NumericDomainError):
    """Training stopped because a gradient or loss became non-finite."""


class ContractError(AttribRoiError, RuntimeError):
    pass


class ParseError(AttribRoiError, ValueError):
    pass


class AtlasConsistencyError(AttribRoiError, KeyError):
    pass
