"""Exception hierarchy shared by the numerical core and the runtime."""


class MHMError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(MHMError, ValueError):
    pass


class InvalidPairError(MHMError, ValueError):
    """An (element, face) pair that is not incident."""


class ResourceLimitError(MHMError):
    pass


class DataError(MHMError, ValueError):
    """Problem data violates its contract (e.g. non-positive diffusion)."""


class AssemblyError(MHMError):
    """A local system is singular or a computed block fails a consistency check."""


class ConfigurationError(MHMError, ValueError):
    pass


class FormulationError(MHMError):
    """The global saddle-point system cannot be solved for this configuration."""


class IncompleteReductionError(MHMError):
    pass


class ConsistencyError(MHMError):
    pass


class OracleScaleError(MHMError):
    pass


class RegistrationError(MHMError):
    pass


class RunFailedError(MHMError):
    pass


class PartialFailureError(RunFailedError):
    """A worker died in static-partition mode; the whole run is aborted."""


class SimulatedCrash(RunFailedError):
    """Injected master crash used to exercise checkpoint restart."""


class CheckpointError(MHMError):
    """Checkpoint is corrupt or belongs to a different configuration."""
