"""Character vocabulary with the reserved CTC / attention symbols."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

BLANK = "<blank>"
UNK = "<unk>"
SOS_EOS = "<sos/eos>"


@dataclass(frozen=True)
class Vocabulary:
    """Ids: blank = 0, unk = 1, content characters from 2, shared sos/eos last."""

    content_tokens: tuple[str, ...]

    def __post_init__(self):
        toks = tuple(self.content_tokens)
        object.__setattr__(self, "content_tokens", toks)
        if len(set(toks)) != len(toks):
            raise ValueError("vocabulary tokens must be unique")
        for t in toks:
            if t in (BLANK, UNK, SOS_EOS) or len(t) != 1 or t.isspace():
                raise ValueError(f"invalid character token {t!r}")

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        chars = sorted({c for text in texts for c in text if not c.isspace()})
        return cls(tuple(chars))

    @property
    def tokens(self) -> list[str]:
        return [BLANK, UNK, *self.content_tokens, SOS_EOS]

    def __len__(self) -> int:
        return len(self.content_tokens) + 3

    blank = 0
    unk = 1

    @property
    def sos(self) -> int:
        return len(self) - 1

    eos = sos

    def encode(self, text: str) -> list[int]:
        index = {c: i + 2 for i, c in enumerate(self.content_tokens)}
        return [index.get(c, self.unk) for c in text if not c.isspace()]

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if 2 <= i < len(self) - 1:
                out.append(self.content_tokens[i - 2])
        return "".join(out)
