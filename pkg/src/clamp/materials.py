"""Material vocabulary, compliance labels, and gripper embodiments.

The canonical label token is lowercase with underscores (``hard_plastic``).
Index order is alphabetical and frozen: classifier heads, confusion
matrices, and vision priors all share it.
"""
from __future__ import annotations

from types import MappingProxyType

MATERIAL_LABELS: tuple[str, ...] = (
    "aluminium",
    "brass",
    "cardboard",
    "dry_wall",
    "fabric",
    "foam",
    "glass",
    "granite",
    "hard_plastic",
    "paper",
    "porcelain",
    "rubber",
    "soft_plastic",
    "steel",
    "vegetable_matter",
    "wood",
)

# Classes with too few objects to learn from; dropped by the dataset filter
# and absent from the classifier head.
SMALL_CLASSES: tuple[str, ...] = ("dry_wall", "granite")

TRAIN_LABELS: tuple[str, ...] = tuple(
    name for name in MATERIAL_LABELS if name not in SMALL_CLASSES
)

COMPLIANCE_LABELS: tuple[str, ...] = ("hard", "soft")

# Benchmark metadata: which materials read as compliant in a grasp.
SOFT_MATERIALS: frozenset[str] = frozenset(
    {"cardboard", "fabric", "foam", "paper", "rubber", "soft_plastic", "vegetable_matter"}
)

EMBODIMENTS: tuple[str, ...] = (
    "clamp_device",
    "franka_clamp",
    "franka_pj",
    "widowx_pj",
)

# Parallel-jaw grippers: no thermal cups, proprioception is linear
# acceleration, impedance uses the acceleration variant.
PARALLEL_JAW_EMBODIMENTS: tuple[str, ...] = ("franka_pj", "widowx_pj")

MATERIAL_INDEX = MappingProxyType({name: i for i, name in enumerate(MATERIAL_LABELS)})
TRAIN_LABEL_INDEX = MappingProxyType({name: i for i, name in enumerate(TRAIN_LABELS)})
COMPLIANCE_INDEX = MappingProxyType({name: i for i, name in enumerate(COMPLIANCE_LABELS)})


def canonical_label(name: str) -> str:
    """Normalize a free-form material name to the canonical token."""
    return name.strip().lower().replace(" ", "_")


def compliance_of(material: str) -> str:
    """Benchmark ground-truth compliance class for a material label."""
    return "soft" if canonical_label(material) in SOFT_MATERIALS else "hard"


def is_parallel_jaw(embodiment: str) -> bool:
    if embodiment not in EMBODIMENTS:
        raise ValueError(f"unknown embodiment: {embodiment!r}")
    return embodiment in PARALLEL_JAW_EMBODIMENTS
