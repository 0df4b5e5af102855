"""Project-wide constants for the grounding model, data and training.

The values in this module configure the synthetic shape world, the
feature layout, the network sizes and the optimisation schedule.
Centralising them avoids magic numbers spread throughout the code base
and makes it easy to switch between the desk-scale defaults and the
larger reference configuration in one place.
"""

from __future__ import annotations

# ─── Shape world ────────────────────────────────────────────────────────────

# Closed attribute sets.  The order fixes the one-hot layout of every
# feature vector, so changing it invalidates saved datasets and checkpoints.
COLORS: tuple[str, ...] = ("red", "green", "blue", "yellow")
SHAPES: tuple[str, ...] = ("circle", "square", "triangle")
SIZES: tuple[str, ...] = ("small", "large")

# Side of the square scene grid.  K = GRID_SIDE ** 2 feature cells.  The
# reference configuration uses a 7 × 7 grid (K = 49).
GRID_SIDE: int = 4
REFERENCE_GRID_SIDE: int = 7

# Inclusive range for the number of objects placed in a generated scene.
MIN_OBJECTS: int = 4
MAX_OBJECTS: int = 8

# Attempts made to find a uniquely resolving expression for a scene before
# giving up and drawing a fresh scene.
MAX_EXPRESSION_RETRIES: int = 50
MAX_SCENE_RETRIES: int = 100

# Expression kinds understood by the generator and the evaluator.
KINDS: tuple[str, ...] = ("phrase", "sentence", "dialog")
DEFAULT_KINDS: tuple[str, ...] = ("sentence", "dialog")

# Train / val / test fractions.  Each split draws from its own seed range.
SPLIT_FRACTIONS: dict[str, float] = {"train": 0.8, "val": 0.1, "test": 0.1}

# ─── Vocabulary ─────────────────────────────────────────────────────────────

NOUN_WORD: str = "object"
RELATION_WORDS: tuple[str, ...] = ("left", "right", "above", "below", "of", "middle", "top")
SCAFFOLD_WORDS: tuple[str, ...] = ("is", "it", "a", "?", "on", "the", "in")
ANSWER_WORDS: tuple[str, ...] = ("yes", "no")

VOCABULARY: tuple[str, ...] = (
    *COLORS,
    *SHAPES,
    *SIZES,
    NOUN_WORD,
    *RELATION_WORDS,
    *SCAFFOLD_WORDS,
    *ANSWER_WORDS,
)

# ─── Feature layout ─────────────────────────────────────────────────────────

# Each grid cell carries the one-hot attribute blocks of the object on it
# followed by two cell-centre coordinates in [-1, 1].
ATTRIBUTE_DIM: int = len(COLORS) + len(SHAPES) + len(SIZES)
VISUAL_DIM: int = ATTRIBUTE_DIM + 2
SPATIAL_DIM: int = 8
CATEGORY_DIM: int = len(SHAPES)

# ─── Model ──────────────────────────────────────────────────────────────────

# Hidden size of every LSTM and MLP.  512 reproduces the reference setup;
# 64 keeps desk-scale training within minutes on one core.
HIDDEN_SIZE: int = 64
REFERENCE_HIDDEN_SIZE: int = 512

ABLATIONS: tuple[str, ...] = ("baseline", "image_only", "proposal_only", "full")
DEFAULT_ABLATION: str = "full"

# ─── Optimisation ───────────────────────────────────────────────────────────

LEARNING_RATE: float = 1e-3
# The learning rate is divided by LR_DECAY_FACTOR once LR_DECAY_EPOCH
# epochs have completed.
LR_DECAY_EPOCH: int = 15
LR_DECAY_FACTOR: float = 10.0
BATCH_SIZE: int = 32
DROPOUT: float = 0.4
EPOCHS: int = 30

ADAM_BETA1: float = 0.9
ADAM_BETA2: float = 0.999
ADAM_EPSILON: float = 1e-8

# ─── File formats ───────────────────────────────────────────────────────────

DATASET_FORMAT_VERSION: int = 1
FLOAT_DIGITS: int = 9

CHECKPOINT_MAGIC: bytes = b"PLANCKPT"
CHECKPOINT_VERSION: int = 1

# Tolerance used when re-checking attention normalisation at write time.
NORMALISATION_TOLERANCE: float = 1e-6

# Nearest-neighbour upscale applied to each trace image cell.
TRACE_IMAGE_SCALE: int = 8
TRACE_TOP_PROPOSALS: int = 5

__all__ = [
    "COLORS",
    "SHAPES",
    "SIZES",
    "GRID_SIDE",
    "REFERENCE_GRID_SIDE",
    "MIN_OBJECTS",
    "MAX_OBJECTS",
    "MAX_EXPRESSION_RETRIES",
    "MAX_SCENE_RETRIES",
    "KINDS",
    "DEFAULT_KINDS",
    "SPLIT_FRACTIONS",
    "NOUN_WORD",
    "RELATION_WORDS",
    "SCAFFOLD_WORDS",
    "ANSWER_WORDS",
    "VOCABULARY",
    "ATTRIBUTE_DIM",
    "VISUAL_DIM",
    "SPATIAL_DIM",
    "CATEGORY_DIM",
    "HIDDEN_SIZE",
    "REFERENCE_HIDDEN_SIZE",
    "ABLATIONS",
    "DEFAULT_ABLATION",
    "LEARNING_RATE",
    "LR_DECAY_EPOCH",
    "LR_DECAY_FACTOR",
    "BATCH_SIZE",
    "DROPOUT",
    "EPOCHS",
    "ADAM_BETA1",
    "ADAM_BETA2",
    "ADAM_EPSILON",
    "DATASET_FORMAT_VERSION",
    "FLOAT_DIGITS",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "NORMALISATION_TOLERANCE",
    "TRACE_IMAGE_SCALE",
    "TRACE_TOP_PROPOSALS",
]
