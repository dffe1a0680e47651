"""Exception hierarchy and process exit codes."""
from enum import IntEnum


class ExitCode(IntEnum):
    """CLI exit codes."""
    SUCCESS = 0
    INTERNAL_ERROR = 1
    VALIDATION_ERROR = 2
    PARTIAL_FAILURE = 3


class NutriscreenError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(NutriscreenError):
    """Input, schema or precondition violation."""


class ComputationError(NutriscreenError):
    """Numerical failure inside a fit or transform."""


# data_model
class SchemaError(ValidationError):
    """Malformed schema or column kind."""


class DatasetInvalid(ValidationError):
    """Dataset violates its shape or value invariants."""


class SingleClassDataset(ValidationError):
    """One of the two label classes is absent."""


class RatioOutOfRange(ValidationError):
    """Split ratio outside (0, 1)."""


class TooFewPerClass(ValidationError):
    """A class has fewer members than requested folds."""


# preprocess
class ImplausibleZScore(ValidationError):
    """Anthropometric z-score outside the hard rejection window."""


class AllMissingColumn(ValidationError):
    """Mode imputation requested on a column with no observed values."""


class MissingValueRejected(ValidationError):
    """A missing value appeared in a column whose policy is reject."""


class UnknownCategory(ValidationError):
    """Raw value not present in the column's category map."""


class SchemaMismatch(ValidationError):
    """Raw table and schema disagree on columns or rules."""


class StatsDimensionMismatch(ValidationError):
    """Standardization statistics do not match the column count."""


# feature_select
class NegativeValueForChiSquare(ValidationError):
    """Chi-square scoring needs non-negative feature values."""


class ConstantLabel(ValidationError):
    """Scoring needs both label values present."""


class BaseModelTrainingFailure(ComputationError):
    """The base learner inside a wrapper method failed to fit."""


class FeatureListMismatch(ValidationError):
    """Method scores cover different feature lists."""


# models
class InvalidHyperparameter(ValidationError):
    """Hyperparameter outside its allowed range."""


class SingularCovariance(ComputationError):
    """Pooled covariance still singular after jitter."""


class KLargerThanTrainingSet(ValidationError):
    """KNN neighbourhood larger than the stored training set."""


class DimensionMismatch(ValidationError):
    """Feature row width differs from the width seen at fit time."""


class NonScalarOutput(ValidationError):
    """Backward pass started from a non-scalar tensor."""


class DivergenceDetected(ComputationError):
    """Training loss became NaN or infinite."""


class WrongArchitecture(ValidationError):
    """Operation requested on a network of the wrong architecture."""


# metrics_eval
class LengthMismatch(ValidationError):
    """Label and prediction vectors differ in length."""


class NonBinaryValue(ValidationError):
    """A label or prediction outside {0, 1}."""


class EmptyEvaluation(ValidationError):
    """Metrics requested over zero rows."""


class SingleClassEvaluation(ValidationError):
    """Ranking metric requested with only one class present."""


class NoPositives(ValidationError):
    """Average precision requested without positive labels."""


class ProbabilityOutOfRange(ValidationError):
    """Probability outside [0, 1]."""


class ConvergenceFailure(ComputationError):
    """Iterative eigensolver did not converge."""


# harness
class MissingArtifacts(ValidationError):
    """Run directory lacks the files a report needs."""


class ConfigInvalid(ValidationError):
    """Benchmark configuration failed schema validation."""
