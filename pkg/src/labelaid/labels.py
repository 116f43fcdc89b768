"""Label scheme: relevance plus polarity toward containment measures."""

from __future__ import annotations

import enum


class LabelCategory(enum.IntEnum):
    """The four stance categories, with stable integer codes.

    Serialization always goes through the name, never the code.
    """

    Unrelated = 0
    Comment = 1
    Support = 2
    Refute = 3

    @classmethod
    def from_name(cls, name: str) -> "LabelCategory":
        try:
            return cls[name]
        except KeyError:
            raise ValueError(
                f"unknown label {name!r}; expected one of {[m.name for m in cls]}"
            ) from None


LABELS: tuple[LabelCategory, ...] = tuple(LabelCategory)
N_LABELS: int = len(LABELS)
LABEL_NAMES: tuple[str, ...] = tuple(m.name for m in LABELS)
