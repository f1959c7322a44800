# Configuration file for the Stokes shape optimizer

# Application Settings
APP_NAME = "shapeopt"
VERSION = "1.0.0"

# Geometry
OUTER_RADIUS = 1.0
TARGET_RADIUS = 0.2
CASE_RADIUS = 0.4                  # Case 1 initial inner circle
ELLIPSE_SEMI_AXES = (0.6, 0.4)     # Case 2: x^2/9 + y^2/4 = 1/25
MIN_N_THETA = 8
MIN_N_R = 2

# Mesh markers (file codes)
INTERIOR = 0
OUTER_FIXED = 1
INNER_FREE = 2

# Degeneracy guard: area_epsilon = AREA_EPSILON_FACTOR * bbox_area / n_t
AREA_EPSILON_FACTOR = 1e-12
MESH_QUALITY_FLOOR = 0.05

# Linear solver
SOLVER_TOLERANCE = 1e-9
COMPATIBILITY_TOLERANCE = 1e-8

# Shape calculus
RELATIVE_FLOOR = 1e-14
FD_STEP = 1e-3
GRADIENT_RECOVERY = "flux"         # flux | patch | element

# Optimizer defaults
DEFAULTS = {
    'case': 'circle_04',
    'alpha': 0.01,
    'n_theta': 64,
    'n_r': 16,
    'max_iters': 30,
    'grad_tol': 1e-6,              # relative to the initial ||d_0||
    'step_cap': 0.2,
    'armijo_c': 1e-4,
    'descent': 'h1',
    'output_dir': 'results',
    'emit_vtk': True,
    'fd_check': False,
    'fd_step': FD_STEP,
    'recovery': GRADIENT_RECOVERY,
}
MAX_BACKTRACKS = 30
STAGNATION_FACTOR = 1e-12

# Choices
CASES = ["circle_04", "ellipse", "target"]
DESCENT_METHODS = ["h1", "raw_normal"]
RECOVERY_METHODS = ["flux", "patch", "element"]

# Output Settings
FLOAT_FORMAT = "%.17g"
HISTORY_FILE = "history.csv"
TIMING_FILE = "timing.csv"
SUMMARY_FILE = "summary.txt"
FINAL_BOUNDARY_FILE = "final_boundary.csv"
FAILED_MESH_FILE = "failed_mesh.msh"
CONVERGENCE_FILE = "convergence.csv"
CONVERGENCE_MESHES = [(32, 8), (64, 16), (128, 32)]
DENSITY_FILE = "boundary_density.csv"
GRADIENT_CHECK_FILE = "gradient_check.csv"
MESH_FILE_PATTERN = "mesh_{:04d}.msh"
FIELDS_FILE_PATTERN = "fields_{:04d}.vtk"
