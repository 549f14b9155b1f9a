"""Design-based inference for two-level factorial and fractional factorial
designs, including observational data embedded in a hypothetical design."""

__version__ = "0.1.0"

from .design import (  # noqa: E402
    I,
    AliasTable,
    Design,
    DesignSpec,
    EffectWord,
    Generator,
    alias_relations,
    alias_set,
    alias_table,
    canonical_words,
    contrast_vector,
    defining_subgroup,
    enumerate_fractions,
    format_estimand,
    fraction_runs,
    full_factorial_runs,
    max_resolution_fractions,
    model_matrix,
    parse_design,
    partial_alias_decomposition,
    resolution,
    run_index,
)
from .data import (  # noqa: E402
    CountsTable,
    Dataset,
    IngestionReport,
    Schema,
    counts_table,
    feasible_fractions,
    load_dataset,
    load_schema,
    parse_schema,
)
from .estimation import (  # noqa: E402
    EffectEstimate,
    GroupSummary,
    ScienceTable,
    WaldRegion,
    confidence_interval,
    covariance_matrix,
    estimate_effect,
    estimate_effects,
    finite_population_components,
    incomplete_estimate,
    incomplete_weights,
    neyman_covariance,
    neyman_variance,
    oracle_randomization_moments,
    summarize_groups,
    wald_region,
)
from .regression import implied_estimand, ols_fit, saturated_matrix  # noqa: E402
from .randomization import fisher_test, joint_fisher_test  # noqa: E402
from .balance import (  # noqa: E402
    manova_wilks,
    sequential_trim,
    standardized_differences,
    two_group_global_test,
)
