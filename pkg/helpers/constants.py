"""
Constants used throughout the SAMIRO lab.
"""

# Numeric floors
LOG_ABS_FLOOR = 1e-8  # log|x| reads max(|x|, floor)
CHANNEL_SCALE_FLOOR = 1e-8  # |w_c| floor wherever a loss reads it
NORM_EPS = 1e-8  # default normalisation guard
BCE_CLAMP = 1e-7  # probabilities clamped to [BCE_CLAMP, 1 - BCE_CLAMP]

# Gradient checking
GRADCHECK_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4

# Evaluation defaults
DEFAULT_IOU_THRESHOLD = 0.5
DEFAULT_LANE_WIDTH = 30  # calibrated to 1640x590 frames
DEFAULT_SYNTH_LANE_WIDTH = 5  # 64x128 synthetic frames
DEFAULT_CULANE_SHAPE = (590, 1640)
TUSIMPLE_DIST_THRESHOLD = 20.0
TUSIMPLE_POINT_RATIO = 0.85
TUSIMPLE_ABSENT = -2

# Regulariser defaults
DEFAULT_LAMBDA = 0.1
DEFAULT_ATTENTION_KERNEL = 7  # CBAM convention
NORM_MODES = ("per_channel_spatial", "per_position_channel", "global_frobenius")
LOSS_VARIANTS = ("samiro", "miro", "plain_l2", "none")

# Loss-component ablation settings: name -> (variant, use_norm, use_attention)
ABLATION_SETTINGS = {
    "baseline": ("none", False, False),
    "samiro_only": ("samiro", False, False),
    "samiro_norm": ("samiro", True, False),
    "samiro_all": ("samiro", True, True),
}

# Scene perturbation tags
TAG_NORMAL = "normal"
TAG_ILLUMINATION = "illumination"
TAG_OCCLUSION = "occlusion"

# Scene generation
GENERATION_RETRIES = 16
ANNOTATION_DECIMALS = 4

# SMRT container
SMRT_MAGIC = b"SMRT"
SMRT_VERSION = 1

# Fixed output filenames
LOSS_CSV = "loss.csv"
REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"
RESOLVED_CONFIG = "config.resolved"
SUMMARY_TXT = "summary.txt"
ABLATION_CSV = "ablation.csv"
ABLATION_OCCLUDED_CSV = "ablation_occluded.csv"
RUNS_DIR = "runs"
DATA_DIR = "data"
CHECKPOINT_DIR = "checkpoint"
PREDICTIONS_DIR = "predictions"
INDEX_FILE = "index.txt"
IMAGES_DIR = "images"

# Exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3
