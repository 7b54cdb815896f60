"""Exception types shared across the package."""


class KickflowError(Exception):
    """Base class for all package-specific errors."""


class GeometryError(KickflowError):
    """Invalid domain, window, or grid geometry."""


class FieldFormatError(KickflowError):
    """Malformed or incompatible field snapshot data."""


class NoiseModelError(KickflowError):
    """Noise model violates a structural hypothesis (amplitudes, window)."""


class CflError(KickflowError):
    """Advective CFL condition violated; the step is rejected."""


class SolverError(KickflowError):
    """Linear solve failed to meet its residual tolerance."""


class EigenSolverError(KickflowError):
    """Eigenvalue iteration failed to converge or found a degenerate pair."""


class DissipationError(KickflowError):
    """No contractive one-period bound could be fitted (kappa >= 1)."""


class ControllabilityError(KickflowError):
    """Decay-to-target iteration exceeded its step cap."""


class CouplingError(KickflowError):
    """Coupling construction failed structurally (not a mere non-contraction)."""


class DegeneracyError(KickflowError):
    """Particle weights collapsed or a Perron eigenvalue is not simple."""


class ChainFormatError(KickflowError):
    """Malformed finite-chain definition (rows, entries, irreducibility)."""


class ConfigError(KickflowError):
    """Experiment configuration is malformed; carries the offending key path."""

    def __init__(self, message: str, key_path: str = ""):
        super().__init__(message)
        self.key_path = key_path


class ReportError(KickflowError):
    """Report or manifest emission failed (unwritable path, bad shape)."""
