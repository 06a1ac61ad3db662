"""Configuration constants for the federated retina simulator."""

# Label space
NUM_CLASSES = 5
CLASS_NAMES = ["No DR", "Mild", "Moderate", "Severe", "Proliferative"]

# Model parameters
INPUT_SHAPE = (64, 64, 3)
TRUNK_WIDTHS = (8, 16, 32)   # channels of conv blocks 1..3
DEFAULT_TRUNK_DEPTH = 2
HEAD_UNITS = 64
DROPOUT_RATE = 0.45
BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.9

# Training parameters
EPOCHS = 40
BATCH_SIZE = 32
LEARNING_RATE = 0.001
LR_HALVING_PATIENCE = 1            # standalone training
LR_HALVING_PATIENCE_FEDERATED = 5
EARLY_STOP_PATIENCE = 10
IMPROVEMENT_THRESHOLD = 1e-6

# Data preparation
FLIP_PROB = 0.5
ROTATE_PROB = 0.25
ROTATE_MAX_DEGREES = 30.0
BRIGHTNESS_CONTRAST_PROB = 0.25
CONTRAST_RANGE = (0.8, 1.2)
BRIGHTNESS_RANGE = (-0.1, 0.1)
GAUSSIAN_SIGMA = 1.0
GAUSSIAN_KERNEL = 5
PIXEL_NOISE_SIGMA = 0.02
TEST_FRACTION = 0.10
VALIDATION_FRACTION = 0.10
DEGRADE_QUALITY = (30, 50)

# Federation parameters
MAX_ROUNDS = 50
LOCAL_EPOCHS = 5
CONVERGENCE_PATIENCE = 5
CONVERGENCE_DELTA = 1e-4
PARTICIPATION = 1.0

# Transport parameters
READ_TIMEOUT = 60.0
ROUND_TIMEOUT = 3600.0
ACCEPT_TIMEOUT = 120.0
MAX_FRAME_BYTES = 256 * 1024 * 1024

# Experiment parameters (desk scale, ~1/10 of the study's datasets)
INSTITUTION_SIZES = {"H1": 1500, "H2": 1200, "H3": 400}
INDEPENDENT_TEST_SIZE = 650
# Grade mix of the synthetic institutions (imbalanced, as in screening data)
GRADE_MIX = (0.45, 0.12, 0.25, 0.08, 0.10)
CROSSVAL_FOLDS = 5
