"""Exception hierarchy shared by every pipeline stage"""


class SSLPipelineError(Exception):
    """Base class for all pipeline errors"""


# Dataset

class MalformedCorpusError(SSLPipelineError):
    """Corpus file is missing or its size is not a multiple of the record length"""


class CorruptRecordError(SSLPipelineError):
    """A record carries a label outside [0, C)"""


class InvalidSpecError(SSLPipelineError):
    """Imbalance / rescale request cannot be satisfied"""


class EmptyDatasetError(SSLPipelineError):
    """Operation needs at least one record"""


# Networks and checkpoints

class InvalidConfigError(SSLPipelineError):
    """Architecture or run configuration violates an invariant"""


class ShapeMismatchError(SSLPipelineError):
    """Tensor shapes do not match the declared contract"""


class UnknownHeadError(SSLPipelineError):
    """Regression head index outside {base, 1..K}"""


class CheckpointVersionError(SSLPipelineError):
    """Checkpoint was written by an unsupported format version"""


class CorruptCheckpointError(SSLPipelineError):
    """Checkpoint is truncated or fails its integrity check"""


class IncompatibleBundleError(SSLPipelineError):
    """Model bundle lacks a head the training method needs"""


# Objectives

class DegenerateInputError(SSLPipelineError):
    """Input is too degenerate for the computation (zero-norm row, too few samples)"""


# Clustering / distillation

class InvalidClusterCountError(SSLPipelineError):
    """K < 1 or K > N"""


class EmptyClusterError(SSLPipelineError):
    """k-means kept producing an empty cluster after every reseed"""


class EmptyPartitionError(SSLPipelineError):
    """An expert was asked to train on an empty subset"""


class AssignmentError(SSLPipelineError):
    """Cluster assignments do not cover the dataset or index a missing expert"""


class LabelError(SSLPipelineError):
    """Class label outside [0, C)"""


class InstanceTooLargeError(SSLPipelineError):
    """Brute-force reference asked to enumerate too large an instance"""


# Harness

class BudgetMismatchError(InvalidConfigError):
    """Stage epochs do not sum to the comparison budget"""


class DuplicateRunError(SSLPipelineError):
    """Grid contains the same (subset, method, seed) twice"""


class MissingArtifactsError(SSLPipelineError):
    """Report requested on a directory without results"""


class RunLockedError(SSLPipelineError):
    """Another process owns the run directory"""


class StageError(SSLPipelineError):
    """A pipeline stage failed; carries the stage tag and its exit code"""

    def __init__(self, stage: str, exit_code: int, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.exit_code = exit_code
        self.cause = cause


class DivergenceError(SSLPipelineError):
    """Training produced a non-finite loss"""
