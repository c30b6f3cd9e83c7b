"""Voter-transition estimation in small areas and multinomial models of the transitions."""

from .covariate_lab import (
    CovariateMatrix,
    add_zone_dummies,
    apply_recipe,
    composite,
    correlation_report,
    dichotomize_tradition,
    load_covariates,
    residualize,
    standardize,
)
from .data_model import (
    OptionSet,
    PartyAggregation,
    StationRecord,
    ZoneTable,
    aggregate_parties,
    build_zones,
    load_stations,
    reconcile_electorates,
    write_stations,
)
from .ei_estimator import (
    EstimatorConfig,
    FlowTable,
    TransitionEstimate,
    fit_zone,
    flow_counts,
    goodness_of_fit,
    predict_station,
    rake_to_margins,
    standard_errors,
)
from .transition_mnl import (
    MnlModel,
    TransitionCountPanel,
    build_panel,
    deviance_explained,
    fit,
    marginal_effects,
    residual_diagnostics,
    significance_flags,
    stepwise_select,
)
from .volatility import (
    VolatilityRecord,
    aggregate_region,
    row_percentages,
    volatility_correlation,
    volatility_indexes,
)

__version__ = "0.1.0"
