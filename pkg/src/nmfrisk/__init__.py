"""Positive-only risk stratification from sparse NMF patterns.

Learns latent covariate patterns from diagnosed patients, weights covariates
by rank-weighted NMF coefficients and prevalence KL divergence, and scores
undiagnosed patients against the diagnosed score distribution.
"""

__version__ = "0.1.0"

from .cohort import (  # noqa: E402
    CohortMatrix,
    CohortSplit,
    filter_min_support,
    ingest_events,
    load_cohort,
    save_cohort,
    split_train_validation,
)
from .divergence import DivergenceTable, divergence_table, kl_divergence, prevalence  # noqa: E402
from .exceptions import DataError, InvalidParameterError, NumericalError  # noqa: E402
from .nmf import (  # noqa: E402
    ErrorCurve,
    FactorModel,
    SparseNMF,
    elbow,
    find_elbow,
    fit_nmf,
    reconstruction_error,
    sweep_k,
)
from .rwc import FeatureWeights, RWCSelector, rwc_ensemble, rwc_single, select_features  # noqa: E402
from .scoring import (  # noqa: E402
    ReferenceDistribution,
    RiskProfile,
    RiskStratifier,
    categorize,
    normalize_score,
    percentile_rank,
    raw_score,
    score_cohort,
)
from .synth import SynthConfig, SynthTruth, generate  # noqa: E402
from .validation import (  # noqa: E402
    LabelQualityReport,
    LogisticGD,
    ScoreSummary,
    SimilarityCurve,
    jaccard_topk,
    label_quality_experiment,
    score_summary,
)
