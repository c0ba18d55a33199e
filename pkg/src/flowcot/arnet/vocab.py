"""Shared token id space: specials, instruction words, patch codes, actions.

Frame tokens and flow-image tokens index the same code range — one
vocabulary for both modalities. Segment ids (per-position modality tags fed
to the model as an additive embedding) are derived from block structure.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigError

# Special token ids.
PAD, BOS, EOS, SEP_TEXT, SEP_FRAME, SEP_FLOW, SEP_ACTION = range(7)
N_SPECIAL = 7

# Segment (modality) ids for the additive segment embedding.
SEG_SPECIAL, SEG_TEXT, SEG_FRAME, SEG_FLOW, SEG_ACTION = range(5)
N_SEGMENTS = 5

_SEPARATOR_SEGMENT = {SEP_TEXT: SEG_TEXT, SEP_FRAME: SEG_FRAME,
                      SEP_FLOW: SEG_FLOW, SEP_ACTION: SEG_ACTION}


@dataclass(frozen=True)
class VocabLayout:
    n_text: int
    n_code: int
    n_special: int = N_SPECIAL
    n_action: int = 6

    def __post_init__(self):
        if self.n_special != N_SPECIAL:
            raise ConfigError(f"n_special must be {N_SPECIAL}")
        if self.n_text < 0 or self.n_code < 1 or self.n_action < 1:
            raise ConfigError("invalid vocab segment sizes")

    @property
    def text_offset(self) -> int:
        return self.n_special

    @property
    def code_offset(self) -> int:
        return self.n_special + self.n_text

    @property
    def action_offset(self) -> int:
        return self.code_offset + self.n_code

    @property
    def total(self) -> int:
        return self.action_offset + self.n_action

    def text_id(self, word_id: int) -> int:
        if not 0 <= word_id < self.n_text:
            raise ConfigError(f"word id {word_id} out of range")
        return self.text_offset + word_id

    def code_id(self, code: int) -> int:
        if not 0 <= code < self.n_code:
            raise ConfigError(f"code {code} out of range")
        return self.code_offset + code

    def action_id(self, action: int) -> int:
        if not 0 <= action < self.n_action:
            raise ConfigError(f"action {action} out of range")
        return self.action_offset + action

    def is_code(self, tok: int) -> bool:
        return self.code_offset <= tok < self.action_offset

    def is_action(self, tok: int) -> bool:
        return self.action_offset <= tok < self.total

    def code_index(self, tok: int) -> int:
        return tok - self.code_offset

    def action_index(self, tok: int) -> int:
        return tok - self.action_offset

    def to_dict(self) -> dict:
        return {"n_special": self.n_special, "n_text": self.n_text,
                "n_code": self.n_code, "n_action": self.n_action}

    @classmethod
    def from_dict(cls, d: dict) -> "VocabLayout":
        return cls(n_text=d["n_text"], n_code=d["n_code"],
                   n_special=d["n_special"], n_action=d["n_action"])


def infer_segments(ids, vocab: VocabLayout) -> list[int]:
    """Segment id per position: separators open the block they lead."""
    segs = []
    current = SEG_SPECIAL
    for tok in ids:
        tok = int(tok)
        if tok in _SEPARATOR_SEGMENT:
            current = _SEPARATOR_SEGMENT[tok]
            segs.append(current)
        elif tok in (PAD, BOS, EOS):
            current = SEG_SPECIAL
            segs.append(SEG_SPECIAL)
        else:
            segs.append(current)
    return segs
