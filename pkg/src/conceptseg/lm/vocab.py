"""Whitespace-token vocabulary over the shape-world surface language.

The token list is derived from the query/concept template banks so the
generator and the model can never drift apart. Marker tokens, the seg
token, end-of-sequence, and padding are single reserved entries.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from ..shapeworld.queries import (
    COLOR_GROUPS,
    MARKER_CLOSE,
    MARKER_OPEN,
    MOTIONS,
    _QUERY_TEMPLATES,
    _SET_TEMPLATES,
)
from ..shapeworld.scenes import COLORS, SHAPES, SIZES

PAD = "<pad>"
UNK = "<unk>"
EOS = "<eos>"
ASST = "<asst>"
SEG = "[SEG]"

_SPECIALS = (PAD, UNK, EOS, ASST, MARKER_OPEN, MARKER_CLOSE, SEG)


def _template_words() -> set[str]:
    words: set[str] = set()
    for bank in (_QUERY_TEMPLATES, _SET_TEMPLATES):
        for templates in bank.values():
            for t in templates:
                cleaned = t.replace("{v}", " ").replace("{a}", " ").replace("{b}", " ")
                words.update(cleaned.split())
    words.update(("sure", ":", ",", "no", "target", "shape", "moving", "plus"))
    words.update(COLORS)
    words.update(SHAPES)
    words.update(SIZES)
    words.update(COLOR_GROUPS)
    words.update(MOTIONS)
    words.add("still")
    return words


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        index = {t: i for i, t in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        for special in _SPECIALS:
            if special not in index:
                raise ValueError(f"vocabulary is missing reserved token {special!r}")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def asst_id(self) -> int:
        return self._index[ASST]

    @property
    def ref_open_id(self) -> int:
        return self._index[MARKER_OPEN]

    @property
    def ref_close_id(self) -> int:
        return self._index[MARKER_CLOSE]

    @property
    def seg_id(self) -> int:
        return self._index[SEG]

    def encode(self, text: str) -> list[int]:
        return [self._index.get(w, self.unk_id) for w in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def sha256(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = tuple(Path(path).read_text(encoding="utf-8").splitlines())
        return cls(tokens=tokens)


def build_vocabulary() -> Vocabulary:
    """The canonical shape-world vocabulary: specials first, then sorted words."""
    return Vocabulary(tokens=_SPECIALS + tuple(sorted(_template_words())))
