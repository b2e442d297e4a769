"""Exception types shared across the package."""


class InputError(ValueError):
    """Bad argument value (out-of-range index, negative density, bad shape)."""


class ConfigurationError(ValueError):
    """Mismatched dimensions between embeddings and network parameters."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required (NaN loss, inf input)."""


class UsageError(RuntimeError):
    """API called in the wrong order, e.g. backward on a stale forward tape."""


class LoadError(OSError):
    """A dataset, checkpoint or script file is missing or ill-formed."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class ValidationError(ValueError):
    """Loaded data violates an invariant (e.g. mask/image resolution mismatch)."""
