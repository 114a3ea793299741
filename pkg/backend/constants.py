"""
Constants for the StyleBridge toy-speech stack

Centralized constants to avoid magic numbers throughout the codebase.
Generator constants are frozen: the factor estimators in data/toydata.py
are exact only for this generator family.
"""

import math


class TrainMode:
    """Per-step training modes accepted by pipeline.train_step."""
    VAEFS = "vaefs"
    ONE_STAGE = "one_stage"
    TWO_STAGE_S1 = "two_stage_s1"
    TWO_STAGE_S2 = "two_stage_s2"

    ALL = (VAEFS, ONE_STAGE, TWO_STAGE_S1, TWO_STAGE_S2)


class SystemMode:
    """System-level modes accepted in the config file."""
    VAEFS = "vaefs"
    ONE_STAGE = "one_stage"
    TWO_STAGE = "two_stage"

    ALL = (VAEFS, ONE_STAGE, TWO_STAGE)


class StyleSource:
    """Where synthesize() takes its style latent from."""
    REFERENCE = "reference"
    BRIDGE = "bridge"
    PRIOR = "prior"  # ablation path: z ~ N(0, I) without a bridge


# Toy mel geometry
N_BANDS = 32  # F
N_FRAMES = 64  # L
N_CONTENTS = 8
RIDGE_WIDTH = 1.5  # w, in bands

# Factor ranges
ENERGY_RANGE = (0.5, 1.5)
PITCH_RANGE = (8.0, 24.0)
VARIATION_RANGE = (0.0, 6.0)

FACTOR_NAMES = ("energy", "pitch", "variation")

# Envelope family env_c(l) = ENV_BASE + ENV_DEPTH * cos(...); its maximum over l is 1.0
ENV_BASE = 0.7
ENV_DEPTH = 0.3
ENV_MAX = ENV_BASE + ENV_DEPTH
TWO_PI = 2.0 * math.pi

# Dataset split (by index)
TRAIN_FRACTION = 0.8
VAL_FRACTION = 0.1
MIN_DATASET_SIZE = 10

# Network widths
REFERENCE_DIM = 32  # reference-encoder output h
CONTENT_EMBED_DIM = 16
TIME_EMBED_DIM = 16
COND_PROJ_DIM = 32

# Adam
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Finite differences
FD_STEP = 1e-5
FD_SCALE_FLOOR = 1e-6

# Diffusion schedule (reference values at T=1000, rescaled for smaller T)
REFERENCE_T = 1000
BETA_START = 1e-4
BETA_END = 0.02
MAX_RESCALED_BETA = 0.5

# Quantizer
EMA_EPSILON = 1e-5

# Metrics
LOG_FLOOR = 1e-5
MCD_COEFFS = 13
EIG_TOLERANCE = 1e-8
MCD_CONSTANT = 10.0 / math.log(10.0) * math.sqrt(2.0)
