"""edgeform: singular first-order PDEs and normal forms for edge metrics."""

from .errors import *  # noqa: F401,F403
from .fields import ChartBox, Field
from .charflow import CharCurveProblem, integrate_char_curve, fixed_point_curve, linearization_gate
from .sivp import SingularIVP, ReducedIVP, solve_sivp, solve_reduced, series_oracle
from .edgegeom import (EdgeMetric, horizontal_check, gnormalized_check, alpha_form, exactness_test,
                       rescale_defining_function, make_g_related, normlem_check)
from .normalform import (eikonal_branch_solve, solve_eikonal, n_field, build_diffeo, pullback_metric,
                         verify_normal_form, normalize, DiffeoMap, NormalFormReport)

__version__ = "0.1.0"
