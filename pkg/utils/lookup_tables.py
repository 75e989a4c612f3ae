"""Lookup tables embedded directly in code (no external CSV needed)"""

# DOTA v1.0 categories, in the official order
DOTA_CLASSES = (
    "plane",
    "baseball-diamond",
    "bridge",
    "ground-track-field",
    "small-vehicle",
    "large-vehicle",
    "ship",
    "tennis-court",
    "basketball-court",
    "storage-tank",
    "soccer-ball-field",
    "roundabout",
    "harbor",
    "swimming-pool",
    "helicopter",
)

# UCAS-AOD categories
UCAS_AOD_CLASSES = ("plane", "car")

CLASS_TABLES = {
    "dota": DOTA_CLASSES,
    "ucas-aod": UCAS_AOD_CLASSES,
}

# DOTA header prefixes that carry image metadata, not annotations
DOTA_HEADER_PREFIXES = ("imagesource:", "gsd:")

# Names of the serialized target planes, in file order
PLANE_NAMES = (
    "center_hm",
    "vertex_hm",
    "size_map",
    "offset_map",
    "direction_map",
    "pos_mask",
)

# Channel layout of the regression planes
SIZE_CHANNELS = ("w", "h")
OFFSET_CHANNELS = ("center_dx", "center_dy", "vertex_dx", "vertex_dy")

# Serialization schema versions
SCENE_SCHEMA_VERSION = 1
PLANES_SCHEMA_VERSION = 1

# Loss weights λ0..λ4 for L_ht, L_hc, L_Reg, L_offsets, L_D
DEFAULT_LOSS_WEIGHTS = {
    "vertex_heatmap": 1.0,
    "center_heatmap": 1.0,
    "size": 1.0,
    "offsets": 0.1,
    "direction": 1.0,
}

# CLI exit codes (stable contract)
EXIT_OK = 0
EXIT_THRESHOLD_FAILURE = 1
EXIT_INPUT_ERROR = 2

# Round-trip acceptance thresholds
ROUNDTRIP_MIN_IOU = 0.95
ROUNDTRIP_MAX_DIRECTION_ERR = 1.0
