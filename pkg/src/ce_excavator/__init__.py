"""Parameter exclusion for one-parameter families of rational maps near a
Collet-Eckmann map: sphere dynamics, families and constants, orbit return
analysis, the exclusion engine and a command line harness."""

from .sphere import (SpherePoint, RationalMap, chordal_distance, evaluate,
                     spherical_derivative, find_critical_points, iterate_orbit)
from .orbits import (NeighborhoodSystem, ReturnEvent, OrbitTrace, detect_returns,
                     bound_period_pointwise, bound_period_interval,
                     basic_assumption_check, lyapunov_estimates,
                     outside_expansion_estimate, check_bound_expansion)
from .family import (RationalFamily, ConstantsLedger, SamplingPlan, derive_constants,
                     orbit_with_param_derivative, transversality_check,
                     distortion_ratio, lattes2, quadratic_like)
from .exclusion import (PartitionElement, ExclusionReport, start_phase,
                        classify_and_refine, delete_basic_violators, escape_time,
                        large_deviation_cut, star_upgrade, run_window, run_exclusion,
                        history_count, measure_retained)

__version__ = "0.1.0"
