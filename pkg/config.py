# ----------------------------------------------------------------------------
# Numerical defaults for the regime-switching portfolio solver
# ----------------------------------------------------------------------------

# Logging
LOG_FORMAT = "[%(asctime)s] [%(levelname)s] %(name)s: %(message)s"

# Semi-Markov quadrature
TRUNCATION_SURVIVAL = 1e-12       # infinite integrals stop where the survival factor drops below this
QUAD_RTOL = 1e-9                  # relative tolerance of adaptive quadrature on the truncated interval
HAZARD_Y_MAX = 1e4                # age budget for the unbounded-hazard check and the residual sampler
HAZARD_MIN_LAMBDA = 30.0          # Lambda_i(HAZARD_Y_MAX) must exceed this
SAMPLER_REL_TOL = 1e-12           # bisection stops at SAMPLER_REL_TOL * (1 + s)
TABLE_SIMPSON_STEP = 1e-3         # sub-step of the cumulative Simpson table for tabulated rates

# Market validation
DEFAULT_DELTA = 1e-3              # delta of U_delta when the config omits it
ELLIPTICITY_MIN = 1e-10           # smallest admissible eigenvalue of a(t, x)
VALIDATION_TIME_POINTS = 11       # t nodes of the (t, x) validation grid
VALIDATION_XI_SAMPLES = 100       # random directions per grid point in the ellipticity check

# Hamiltonian
GL_NODES = 64                     # Gauss-Legendre nodes per jump-measure support interval
NEWTON_TOL = 1e-9                 # projected-gradient norm at convergence
NEWTON_MAX_ITER = 200
NEWTON_STALL_TOL = 1e-7           # projected-gradient norm accepted when the line search can no longer move u
NEWTON_FD_STEP = 1e-5             # central-difference step of the numerical Hessian (scaled by 1 + |u|)
CLOSED_FORM_MIN_U = 1e-6          # below this |u| the uniform-jump closed form is not used
TIME_SIMPSON_PANELS = 16          # panels of the composite Simpson rule for H_theta

# Volterra solver
PICARD_TOL = 1e-10                # sup-norm change that ends the Picard iteration
PICARD_MAX_SWEEPS = 500
DENOM_FLOOR = 1e-300              # clamp of 1 - F(y | i) for very old ages
DIAG_DOMINANCE_MARGIN = 0.0       # required margin of diagonal dominance of the implicit k x k system

# Monte-Carlo oracle
CDF_TABLE_SIZE = 4096             # points of the inverse-CDF table for density-type jump measures
BLOCK_SIZE = 4096                 # paths per counter-based random stream block
LOW_PRECISION_SE = 1e-2           # oracle reports flag estimates with a larger standard error
THREADS_ENV = "RISKSWITCH_THREADS"

# Command line
VERSION = "0.1.0"                 # written into every output header
ORACLE_Z_MAX = 3.0                # oracle comparison fails when any |z| exceeds this
SOLVER_CROSS_CHECK_TOL = 1e-4     # general vs reduced agreement reported by `solve --mode general`
