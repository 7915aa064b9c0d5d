"""Exception types raised across the toolkit."""


class InvitError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(InvitError, ValueError):
    pass


class DegenerateInstanceError(InvitError, ValueError):
    pass


class ParseError(InvitError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnsupportedFormatError(ParseError):
    pass


class InfeasibleInstanceError(InvitError, ValueError):
    pass


class InfeasibleTourError(InvitError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ContractError(InvitError, ValueError):
    pass


class TerminalStateError(ContractError):
    pass


class ShapeError(InvitError, ValueError):
    pass


class ConfigError(InvitError, ValueError):
    pass


class SizeError(InvitError, ValueError):
    pass


class TrainingDivergenceError(InvitError, RuntimeError):
    pass


class VersionError(InvitError, ValueError):
    pass


class ChecksumError(InvitError, ValueError):
    pass
