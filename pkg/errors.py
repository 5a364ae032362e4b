"""Exception hierarchy shared by every EchoSynth module.

Each class carries the process exit code the CLI returns when it escapes a verb.
"""


class EchoSynthError(Exception):
    """Base class for all expected failures"""
    exit_code = 1


class ConfigurationError(EchoSynthError, ValueError):
    """Invalid configuration, mode mismatch or missing conditioning"""
    exit_code = 2


class ParameterError(ConfigurationError):
    """A numeric parameter is out of its valid range"""


class LexiconError(ConfigurationError):
    """Concept lexicon is incomplete, inconsistent or does not match a checkpoint"""


class ShapeError(EchoSynthError, ValueError):
    """Tensor or mask shapes disagree"""
    exit_code = 2


class TimestepError(EchoSynthError, IndexError):
    """Timestep outside [1, T]"""
    exit_code = 2


class DataIntegrityError(EchoSynthError):
    """Dataset content violates an integrity rule"""
    exit_code = 3


class IntegrityError(DataIntegrityError):
    """Manifest hash does not match the files on disk"""


class SplitError(DataIntegrityError):
    """Patient split cannot be formed"""


class MixError(DataIntegrityError):
    """Real/synthetic mix cannot be formed"""


class ComparisonError(DataIntegrityError):
    """Regime results cannot be compared"""


class NumericFault(EchoSynthError, ArithmeticError):
    """Non-finite values or a failed numerical routine"""
    exit_code = 4


class ContractViolation(EchoSynthError):
    """A caller broke an operation's precondition"""
    exit_code = 5


class InvariantViolation(EchoSynthError):
    """A frozen parameter set changed while it should not have"""
    exit_code = 5


class RunLockError(EchoSynthError):
    """Another process holds the run directory"""
