"""Exception hierarchy shared across the package."""


class HetAttackError(Exception):
    """Base class for all package errors."""


class SchemaError(HetAttackError):
    """An edge, metapath or node violates the declared type schema."""


class InputError(HetAttackError):
    """Malformed user-supplied data (duplicate ids, bad shapes, ...)."""


class BudgetError(HetAttackError):
    """An edit was requested after the perturbation budget was spent."""


class EmptySupportError(HetAttackError):
    """A distribution was requested over an empty candidate set."""


class NonFiniteError(HetAttackError):
    """A tensor operation produced NaN or Inf."""


class ConfigError(HetAttackError):
    """Invalid experiment / training configuration."""


class ParseError(InputError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class DatasetReferenceError(InputError):
    """A file or id referenced by the dataset does not exist."""


class TrainingError(HetAttackError):
    pass
