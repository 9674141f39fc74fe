"""Exception types raised across the package."""


class DlabError(Exception):
    """Base class for every error raised by dlab."""


class ShapeError(DlabError, ValueError):
    pass


class ParameterError(DlabError, ValueError):
    pass


class DegenerateEmbeddingError(DlabError, ValueError):
    def __init__(self, row: int, norm: float):
        super().__init__(f"row {row} has norm {norm:.3g}, too small to normalize")
        self.row = row


class ContractError(DlabError, RuntimeError):
    """Misuse of the compute graph (non-scalar root, cycles)."""


class NumericError(DlabError, ArithmeticError):
    pass


class InputError(DlabError, ValueError):
    pass


class EnsembleError(DlabError, ValueError):
    pass


class TrainingError(DlabError, RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


class DiagnosticError(DlabError, ValueError):
    pass


class GenerationError(DlabError, RuntimeError):
    pass


class ParseError(DlabError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
