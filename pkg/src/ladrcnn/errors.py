"""Exception types shared across the package."""


class LadrcnnError(Exception):
    """Base class for all package errors."""


class ConfigError(LadrcnnError, ValueError):
    pass


class CoincidentKeypoints(LadrcnnError, ValueError):
    pass


class FormatError(LadrcnnError):
    """Checkpoint or manifest content does not match the expected layout."""


class ParseError(FormatError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingImage(FormatError):
    pass


class InvalidBox(FormatError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyDataset(LadrcnnError):
    pass


class DegenerateBox(LadrcnnError, ValueError):
    pass


class NonFiniteLoss(LadrcnnError, FloatingPointError):
    def __init__(self, step, component):
        self.step = step
        self.component = component
        super().__init__(f"non-finite loss at step {step} (component: {component})")
