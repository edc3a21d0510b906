# Epstein-Zin Duality Toolkit Configuration
# Defaults for every run; a run file overrides them per section.

# Solver Settings
PDE_TIME_STEPS = 200
PDE_SPACE_NODES = 400
FIXED_POINT_TOL = 1e-10
FIXED_POINT_MAX_ITER = 50
HESTON_X_MIN = 1e-4
HESTON_X_MAX_FACTOR = 10.0  # grid upper end as a multiple of the long-run level
OU_WIDTH_SDS = 6.0

# Monte Carlo Settings
MC_PATHS = 10000
MC_STEPS = 200
MC_SEED = 20240601
MC_BATCHES = 20
LSMC_DEGREE = 3
IMPLICIT_SOLVE_TOL = 1e-12
IMPLICIT_SOLVE_MAX_ITER = 200
THREADS = 1

# Check Settings
LAGRANGE_POINTS = 21
DUAL_PERTURBATION = 0.1
LYAPUNOV_C_UNDER = 0.01
LYAPUNOV_C_OVER = 0.01
TRANSFORM_SAMPLES = 1000

# Tolerances
CRRA_TOL = 1e-12
CONJUGATE_TOL = 1e-5
CORRELATION_TOL = 1e-12
CONSTRAINT_TOL = 1e-10
BOUND_TOL = 1e-8
SIGMA_BAND = 3.0
SE_WARN_RATIO = 0.05
MAX_TRUNCATION_FRACTION = 1e-3

# Report Settings
REPORTS_FOLDER = 'reports'
FLOAT_FORMAT = '%.17g'
PATH_EXPORT_LIMIT = 1000

# Logging
LOG_LEVEL = 'INFO'
LOG_FILE = 'logs/ezdual.log'
