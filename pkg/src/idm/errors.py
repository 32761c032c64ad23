class IDMError(Exception):
    pass


class ConfigurationError(IDMError, ValueError):
    pass


class ContractError(IDMError, ValueError):
    """An input violated a documented shape or schema precondition."""


class IngestionError(IDMError):
    pass


class TrainingError(IDMError, RuntimeError):
    pass


class EvaluationError(IDMError, ValueError):
    pass
