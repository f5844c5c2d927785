# deqflow/config.py

import os
from dotenv import load_dotenv

# --- Load Environment Variables ---
load_dotenv(override=True)

# --- Process Settings ---
# Where command outputs go when --out is not given on the command line.
OUTPUT_DIR = os.getenv("DEQFLOW_OUTPUT_DIR", "runs")
# The run logs are append-only and flushed to disk every this many records,
# so an interrupted run keeps everything up to the last flush.
FLUSH_EVERY = int(os.getenv("DEQFLOW_FLUSH_EVERY", "10"))


# --- Fixed-Point Solver Defaults ---
# The forward solver. 'anderson', 'broyden' or 'picard'.
SOLVER_METHOD = "anderson"
# Forward budget: the base model solves with up to 40 Anderson steps.
FORWARD_MAX_ITERS = 40
# A solve stops once the relative residual ||f(z) - z|| / ||f(z)|| drops below this.
FORWARD_REL_TOL = 1e-3
# The relative residual denominator never goes below this floor.
RESIDUAL_FLOOR = 1e-8
# Anderson mixing: history length, mixing weight and ridge on the normal equations.
ANDERSON_MEMORY = 5
ANDERSON_BETA = 1.0
ANDERSON_RIDGE = 1e-8
# Broyden skips its rank-1 update when |dz^T B dg| is smaller than this.
BROYDEN_MIN_DENOMINATOR = 1e-12
# Reduced forward budget used by the correction ablation.
ABLATION_BUDGET = 16
# Tolerance at which the solver benchmark counts a method as converged.
BENCH_REL_TOL = 1e-8


# --- Gradient Defaults ---
# Central finite-difference step for gradient checks (float64 everywhere).
FD_EPSILON = 1e-5
# Correction weights default to GAMMA_BASE ** (r - i) for i = 1..r, so the
# latest correction carries the largest weight.
CORRECTION_GAMMA_BASE = 0.8
# Probes per Hutchinson estimate, and the finite-difference step used to
# differentiate the estimate with respect to the parameters.
HUTCHINSON_PROBES = 1
JACOBIAN_REG_DELTA = 1e-4
# The Jacobian-regularization comparison arm runs once per weight listed here.
JACOBIAN_REG_WEIGHTS = (0.1, 1.0)


# --- Toy Flow Model (desk scale) ---
# 64x64 images, encoded at 1/8 resolution into an 8x8 feature grid.
IMAGE_SIZE = 64
TOTAL_STRIDE = 8
ENCODER_HIDDEN_CHANNELS = 16
FEATURE_CHANNELS = 32
CONTEXT_CHANNELS = 32
HIDDEN_CHANNELS = 32
MOTION_CHANNELS = 32
FLOW_HEAD_CHANNELS = 32
ATTENTION_CHANNELS = 16
# Correlation pyramid depth and lookup radius ((2r+1)^2 taps per level).
CORR_LEVELS = 2
CORR_RADIUS = 3
# F1-all outlier thresholds: error above 3px AND above 5% of the true magnitude.
F1_ABS_THRESHOLD = 3.0
F1_REL_THRESHOLD = 0.05


# --- Synthetic Data ---
DEFAULT_SEED = 0
# Largest displacement (image pixels) the generator produces.
MAX_DISPLACEMENT = 4.0
# Step size of the random walk over per-frame motions. 0 gives a static scene.
SMOOTHNESS = 0.5
# Number of random sinusoids per colour channel in the procedural texture.
TEXTURE_COMPONENTS = 24


# --- Training ---
# AdamW with the usual betas and global-norm clipping.
LEARNING_RATE = 4e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 1e-5
GRAD_CLIP_NORM = 1.0
# Desk-scale batch size.
BATCH_SIZE = 4
# Training aborts after this many consecutive steps with a non-finite loss.
MAX_CONSECUTIVE_SKIPS = 10


# --- Logging Configuration ---
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"
LOG_LEVEL = os.getenv("DEQFLOW_LOG_LEVEL", "INFO")
