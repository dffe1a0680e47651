"""Constants for the nutriscreen toolkit."""
from typing import Final

# Label derivation (WHO z-score cutoffs)
ZSCORE_CUTOFF: Final = -2.0
ZSCORE_WARN_LIMIT: Final = 6.0
ZSCORE_REJECT_LIMIT: Final = 10.0
ZSCORE_COLUMNS: Final = ("waz", "haz", "whz")
TARGET_NAME: Final = "malnutrition"

# Raw survey tokens
MISSING_TOKENS: Final = ("", "NA")
NOT_ASKED: Final = "not_asked"
NOT_ASKED_TOKENS: Final = frozenset(
    {
        "not asked",
        "not_asked",
        "don't know",
        "dont know",
        "dk",
        "no response",
        "missing/dk",
        "missing",
    }
)
NOT_ASKED_CODE: Final = -1

# Split protocol
DEFAULT_SEED: Final = 42
DEFAULT_TRAIN_RATIO: Final = 0.8
DEFAULT_FOLDS: Final = 5

# Synthetic data
DEFAULT_SYNTH_ROWS: Final = 6416
DEFAULT_SYNTH_SEED: Final = 7
PREVALENCE_TOLERANCE: Final = 0.02

# Reported component prevalences (share of all children)
UNDERWEIGHT_RATE: Final = 0.2337
STUNTED_RATE: Final = 0.3237
WASTED_RATE: Final = 0.1189
MALNOURISHED_COUNT: Final = 2745

SELECTED_FEATURES: Final = (
    "away_privileges",
    "left_alone",
    "vaccination_record",
    "meal_frequency",
    "recent_diarrhoea",
    "recent_cough",
    "child_age",
    "mother_education",
    "wealth_index",
    "health_insurance",
    "residence",
    "koshi",
    "gandaki",
    "karnali",
    "sudoorpaschim",
    "safe_stool_disposal",
)

# Feature selection
DEFAULT_BORUTA_ITERATIONS: Final = 100
DEFAULT_BORUTA_ALPHA: Final = 0.05
DEFAULT_RANK_THRESHOLD: Final = 14.3
DEFAULT_OVERRIDES: Final = ("recent_diarrhoea", "sudoorpaschim")
SFS_TOLERANCE: Final = 1e-4
L1_GRID: Final = (1e-4, 3.16e-4, 1e-3, 3.16e-3, 1e-2, 3.16e-2, 1e-1)
DEFAULT_SELECTION_METHODS: Final = (
    "mutual_info",
    "chi_square",
    "anova_f",
    "pearson",
    "variance",
    "rfe_logreg",
    "rfe_gb",
    "sfs",
    "emb_rf",
    "emb_l1",
)

# Classifier contract
DECISION_THRESHOLD: Final = 0.5

# Boosting defaults
GBDT_LEARNING_RATE: Final = 0.1
GBDT_ROUNDS: Final = 200
GBDT_L2_LEAF: Final = 1.0
GBDT_MAX_LEAVES: Final = 31
GBDT_MAX_DEPTH: Final = 6
GBDT_BINS: Final = 255

# Neural network defaults
NN_LEARNING_RATE: Final = 0.05
NN_MOMENTUM: Final = 0.9
NN_EPOCHS: Final = 60
NN_BATCH_SIZE: Final = 256
DNN_WIDTHS: Final = (64, 32)
RESNET_WIDTH: Final = 64
RESNET_DEPTH: Final = 2
TABNET_FEATURE_DIM: Final = 16
TABNET_STEPS: Final = 3
TABNET_RELAX: Final = 1.3
TABNET_SPARSITY: Final = 1e-3

# Evaluation
CALIBRATION_BINS: Final = 10
SUMMARY_METRICS: Final = ("accuracy", "precision", "recall", "f1")
PROFILE_METRICS: Final = (
    "accuracy",
    "precision",
    "recall",
    "f1",
    "roc_auc",
    "balanced_accuracy",
)
METRIC_NAMES: Final = (
    "accuracy",
    "precision",
    "recall",
    "f1",
    "roc_auc",
    "average_precision",
    "balanced_accuracy",
    "cohens_kappa",
    "mcc",
    "brier",
)

# Model families, in the order the leaderboard groups them
FAMILY_DEEP: Final = "deep_learning"
FAMILY_BOOSTING: Final = "gradient_boosting"
FAMILY_TRADITIONAL: Final = "traditional"
FAMILIES: Final = (FAMILY_DEEP, FAMILY_BOOSTING, FAMILY_TRADITIONAL)

# Run directory layout
LEADERBOARD_FILE: Final = "leaderboard.csv"
TIMINGS_FILE: Final = "timings.csv"
FAMILY_SUMMARY_FILE: Final = "family_summary.csv"
AGREEMENT_FILE: Final = "agreement.csv"
PROFILE_FILE: Final = "performance_profile.csv"
CONSENSUS_FILE: Final = "consensus_importance.csv"
PCA_FILE: Final = "pca_projection.csv"
RUN_FILE: Final = "run.json"
REPORT_FILE: Final = "report.md"
REPORTS_DIR: Final = "reports"
CALIBRATION_DIR: Final = "calibration"
MODELS_DIR: Final = "models"
