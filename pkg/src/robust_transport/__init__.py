"""Robust distribution learning under combined TV and Wasserstein corruption."""

from .measures import (DiscreteMeasure, MeasureError, MomentSummary, ProjectionFrame,
                       delete_and_renormalize, moments, pushforward, read_csv, tv_distance,
                       write_csv)
from .spectral import (SpectralDecomposition, nonneg_projector, positive_part_trace,
                       shrink_cost, sym_eig, w2_shrink_map)
from .transport import (Coupling, SlicedConfig, max_sliced_profile, max_sliced_w1,
                        robust_wp, w1, w1_1d, wp_exact)
from .adversary import (CorruptionPlan, certify_budgets, combined_corrupt, tv_corrupt,
                        w1_corrupt, w1_decompose)
from .filtering import FilterConfig, FilterReport, filter_standard, filter_w2, robust_mean
from .stability import (StabilityParams, certificate_bound, mean_resilience,
                        mean_resilience_1d, pth_order_resilience, stability_violation)
from .wdro import (LossFamily, LossSpec, dro_value_w1, excess_risk, fit_dro, or_wdro_fit,
                   pushforward_equivalence_check)

__version__ = "0.1.0"
