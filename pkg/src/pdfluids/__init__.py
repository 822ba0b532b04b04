"""Grid-based incompressible fluid solver whose pressure stage generalizes
to a proximal-splitting optimizer, with guided smoke and separating-wall
liquid applications."""

from .fields import (CellFlags, CellType, GridDims, ScalarField, VelocityField,
                     advect_semi_lagrangian, divergence, sample_velocity,
                     upsample)
from .blur import blur_obstacle_aware
from .pressure import (AdaptiveCgController, BcTable, CgConfig,
                       DivergenceProjector, FaceTag, PoissonConvergenceError,
                       adapt_cg_tolerance, project, solve_poisson,
                       subtract_gradient)
from .optim import (AdaptiveParams, AdmmParams, ConvergenceLog, IdentityProx,
                    PdParams, ProxOperator, adaptive_pd_update, admm_solve,
                    iop_solve, krylov_accelerate, moreau_transform, pd_solve,
                    stop_check)
from .guiding import (GuidingConfig, GuidingQuadratic, blend_detail_preserving,
                      blend_linear, default_guiding_params,
                      direct_least_squares, guide_step, guiding_objective,
                      prox_f_guiding, prox_f_guiding_exact)
from .separating import (BcState, BoundaryFace, BoundaryFaces, classify,
                         prox_f_bc, solve_separating_accelerated,
                         solve_separating_standard)
from .scenes import (SceneSpec, SceneState, build_scene, liquid_step,
                     smoke_step)
from .fileio import read_grid, render_pgm, write_convergence_csv, write_grid
from .config import RunConfig

__version__ = "0.1.0"
