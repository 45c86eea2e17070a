"""Exception hierarchy.

Each error class carries the CLI exit code it maps to: 1 for configuration
problems, 2 for file/IO problems, 3 for numeric or state problems.
"""


class FedcaseError(Exception):
    exit_code = 3


class ConfigError(FedcaseError, ValueError):
    exit_code = 1


class FormatError(FedcaseError, IOError):
    """A binary artifact has the wrong magic, version, size or checksum."""

    exit_code = 2


class InputShapeError(FedcaseError, ValueError):
    pass


class EmptyInputError(FedcaseError, ValueError):
    pass


class DegenerateDatasetError(FedcaseError, ValueError):
    pass


class InvalidDatasetError(FedcaseError, ValueError):
    pass


class NumericError(FedcaseError, ArithmeticError):
    pass


class AggregationError(FedcaseError, ValueError):
    pass


class FeatureNormalizationError(NumericError):
    pass


class GeneratorStateError(FedcaseError, RuntimeError):
    pass


class RankingMismatchError(FedcaseError, ValueError):
    pass


class DegenerateRankingError(FedcaseError, ValueError):
    pass


class TrainingError(FedcaseError, RuntimeError):
    """Client failure annotated with the client id and round it happened in."""

    def __init__(self, message, client_id=None, round_index=None):
        super().__init__(message)
        self.client_id = client_id
        self.round_index = round_index
