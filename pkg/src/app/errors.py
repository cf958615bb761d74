class FedTaxiError(Exception):
    """Base class for every error raised by the simulator."""


class InvalidCoordinate(FedTaxiError, ValueError):
    pass


class OutOfBounds(FedTaxiError, ValueError):
    pass


class NegativeTime(FedTaxiError, ValueError):
    pass


class MalformedRow(FedTaxiError, ValueError):
    def __init__(self, line_no: int, reason: str, source: str = "<stream>"):
        self.line_no = line_no
        self.reason = reason
        self.source = source
        super().__init__(f"{source}:{line_no}: {reason}")


class InvalidConfig(FedTaxiError, ValueError):
    def __init__(self, field_path: str, reason: str):
        self.field_path = field_path
        self.reason = reason
        super().__init__(f"{field_path}: {reason}")


class DimensionMismatch(FedTaxiError, ValueError):
    pass


class EmptyBatch(FedTaxiError, ValueError):
    pass


class InvalidWidths(FedTaxiError, ValueError):
    pass


class EmptyClientData(FedTaxiError, ValueError):
    pass


class EmptyUpdateSet(FedTaxiError, ValueError):
    pass


class ShapeMismatch(FedTaxiError, ValueError):
    pass


class DuplicateFacilityId(FedTaxiError, ValueError):
    pass


class TooFewSamples(FedTaxiError, ValueError):
    pass


class LengthMismatch(FedTaxiError, ValueError):
    pass


class EmptyInput(FedTaxiError, ValueError):
    pass


class LabelOutOfRange(FedTaxiError, ValueError):
    pass


class MismatchedTestSets(FedTaxiError, ValueError):
    pass


class TrainingFailed(FedTaxiError):
    def __init__(self, round_number: int, cause: Exception):
        self.round_number = round_number
        self.cause = cause
        super().__init__(f"training failed at round {round_number}: {cause}")
