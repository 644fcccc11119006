"""Four-stage coarse-to-fine label taxonomy shared by the data generator and the heads.

Stage 1 separates real from forged, stage 2 splits forged by generator family,
stage 3 by family x forged-region extent, stage 4 by concrete synthesis method.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

REAL_TAG = "real"

FULL_TAGS = ("ganfull", "dmfull-img", "dmfull-txt")
PARTIAL_TAGS = ("ganpart-img", "ganpart-txt", "dmpart-img", "dmpart-txt")
FORGED_TAGS = ("ganfull", "ganpart-img", "ganpart-txt",
               "dmfull-img", "dmfull-txt", "dmpart-img", "dmpart-txt")
METHOD_TAGS = (REAL_TAG,) + FORGED_TAGS

STAGE_NAMES = (
    ("real", "fake"),
    ("real", "gan", "dm"),
    ("real", "gan-full", "gan-part", "dm-full", "dm-part"),
    METHOD_TAGS,
)

# parent index of each class, per stage transition (stage t+1 class -> stage t class)
_PARENTS = (
    (0, 1, 1),                  # stage2 -> stage1
    (0, 1, 1, 2, 2),            # stage3 -> stage2
    (0, 1, 2, 2, 3, 3, 4, 4),   # stage4 -> stage3
)

_TAG_PATHS = {
    "real": (0, 0, 0, 0),
    "ganfull": (1, 1, 1, 1),
    "ganpart-img": (1, 1, 2, 2),
    "ganpart-txt": (1, 1, 2, 3),
    "dmfull-img": (1, 2, 3, 4),
    "dmfull-txt": (1, 2, 3, 5),
    "dmpart-img": (1, 2, 4, 6),
    "dmpart-txt": (1, 2, 4, 7),
}


def _expansion(parents: tuple[int, ...], n_coarse: int) -> np.ndarray:
    mat = np.zeros((len(parents), n_coarse), dtype=np.float64)
    for fine, coarse in enumerate(parents):
        mat[fine, coarse] = 1.0
    return mat


@dataclass(frozen=True)
class ClassHierarchy:
    """Label sets per stage plus the 0/1 matrices lifting coarse probabilities to fine classes."""

    stage_names: tuple[tuple[str, ...], ...] = STAGE_NAMES
    parents: tuple[tuple[int, ...], ...] = _PARENTS
    expansions: tuple[np.ndarray, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.expansions is None:
            mats = tuple(
                _expansion(p, len(self.stage_names[t]))
                for t, p in enumerate(self.parents)
            )
            object.__setattr__(self, "expansions", mats)
        for t, mat in enumerate(self.expansions):
            if not np.all(mat.sum(axis=1) == 1.0):
                raise ValueError(f"expansion matrix {t} must have exactly one parent per row")
            if mat[0, 0] != 1.0:
                raise ValueError("real must map to real at every stage")

    @property
    def stage_sizes(self) -> tuple[int, ...]:
        return tuple(len(names) for names in self.stage_names)

    def label_path(self, method_tag: str) -> tuple[int, int, int, int]:
        if method_tag not in _TAG_PATHS:
            raise ValueError(f"unknown method tag {method_tag!r}")
        return _TAG_PATHS[method_tag]

    def validate_path(self, path) -> None:
        """Raise if a 4-entry label path violates the parent structure."""
        path = tuple(int(p) for p in path)
        if len(path) != 4:
            raise ValueError(f"label path must have 4 entries, got {len(path)}")
        for t, idx in enumerate(path):
            if not 0 <= idx < len(self.stage_names[t]):
                raise ValueError(f"stage {t + 1} index {idx} out of range")
        for t in range(3):
            if self.parents[t][path[t + 1]] != path[t]:
                raise ValueError(
                    f"stage {t + 2} class {path[t + 1]} is not a child of stage {t + 1} class {path[t]}"
                )

    def to_dict(self) -> dict:
        return {
            "stage_names": [list(names) for names in self.stage_names],
            "parents": [list(p) for p in self.parents],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClassHierarchy":
        return cls(
            stage_names=tuple(tuple(names) for names in data["stage_names"]),
            parents=tuple(tuple(p) for p in data["parents"]),
        )


DEFAULT_HIERARCHY = ClassHierarchy()
