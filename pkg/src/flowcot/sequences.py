"""Token sequence assembly for every training layout.

Grammar per layout (T steps, frames v_0..v_T, flows f_0..f_{T-1}, actions
a_0..a_{T-1}; every image block is its separator plus one code id per patch):

    INTERLEAVED_COT  BOS SEP_TEXT instr [SEP_FRAME v_t SEP_FLOW f_t]*T
                     SEP_FRAME v_T EOS
    GROUPED          BOS SEP_TEXT instr [SEP_FRAME v_t]*(T+1)
                     [SEP_FLOW f_t]*T EOS
    FRAMES_ONLY      BOS SEP_TEXT instr [SEP_FRAME v_t]*(T+1) EOS
    NO_FLOW_LOSS     ids identical to INTERLEAVED_COT
    POLICY           BOS SEP_TEXT instr [SEP_FRAME v_t SEP_ACTION a_t]*T EOS

Supervision: world-model layouts supervise every flow block and every frame
block from t=1 on, separator included (NO_FLOW_LOSS zeroes the flow mask);
POLICY supervises exactly the T action-id tokens. loss_mask[i] = 1 means the
token at position i+1 is a supervised prediction target.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .arnet.vocab import (
    BOS, EOS, SEG_ACTION, SEG_FLOW, SEG_FRAME, SEG_SPECIAL, SEG_TEXT,
    SEP_ACTION, SEP_FLOW, SEP_FRAME, SEP_TEXT, VocabLayout,
)
from .errors import LengthError
from .flowcodec import FlowCodecConfig, flow_to_rgb
from .tokenizer import Codebook, tokenize
from .worldsim import WORDS, Episode

# Block tags reuse the segment encoding; a position's segment id equals its
# block kind, with timestep stored separately.
TAG_SPECIAL, TAG_TEXT, TAG_FRAME, TAG_FLOW, TAG_ACTION = (
    SEG_SPECIAL, SEG_TEXT, SEG_FRAME, SEG_FLOW, SEG_ACTION)


class SequenceLayout(Enum):
    INTERLEAVED_COT = "interleaved"
    GROUPED = "grouped"
    FRAMES_ONLY = "frames-only"
    NO_FLOW_LOSS = "no-flow-loss"
    POLICY = "policy"

    @classmethod
    def from_name(cls, name: str) -> "SequenceLayout":
        for member in cls:
            if name in (member.value, member.name):
                return member
        raise ValueError(f"unknown layout {name!r}")


WM_LAYOUTS = (SequenceLayout.INTERLEAVED_COT, SequenceLayout.GROUPED,
              SequenceLayout.FRAMES_ONLY, SequenceLayout.NO_FLOW_LOSS)


@dataclass
class TokenSequence:
    ids: np.ndarray        # int32 [S]
    tag_kind: np.ndarray   # int8 [S], TAG_* values
    tag_time: np.ndarray   # int16 [S], timestep or -1
    loss_mask: np.ndarray  # int8 [S]; mask[i]=1 -> position i+1 supervised
    layout: SequenceLayout

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def segments(self) -> np.ndarray:
        return self.tag_kind


@dataclass
class TokenizedEpisode:
    """Episode pre-mapped to codebook indices (not yet vocabulary ids)."""
    instr_words: tuple[int, ...]          # word ids into WORDS
    frame_codes: np.ndarray               # int32 [T+1, tokens_per_image]
    flow_codes: np.ndarray                # int32 [T, tokens_per_image]
    actions: np.ndarray                   # int32 [T]
    seed: int

    @property
    def steps(self) -> int:
        return len(self.actions)

    @classmethod
    def from_episode(cls, ep: Episode, cb: Codebook,
                     codec: FlowCodecConfig) -> "TokenizedEpisode":
        frames = np.stack([tokenize(f, cb).reshape(-1) for f in ep.frames])
        if ep.flows:
            flows = np.stack([tokenize(flow_to_rgb(f, codec), cb).reshape(-1)
                              for f in ep.flows])
        else:
            flows = np.zeros((0, frames.shape[1]), dtype=np.int32)
        return cls(instr_words=tuple(ep.instruction.ids),
                   frame_codes=frames.astype(np.int32),
                   flow_codes=flows.astype(np.int32),
                   actions=np.asarray([int(a) for a in ep.actions],
                                      dtype=np.int32),
                   seed=ep.seed)


def default_vocab(cb: Codebook) -> VocabLayout:
    return VocabLayout(n_text=len(WORDS), n_code=len(cb))


class _Builder:
    def __init__(self):
        self.ids: list[int] = []
        self.kind: list[int] = []
        self.time: list[int] = []
        self.supervised: list[bool] = []

    def add(self, tok, kind, time=-1, supervised=False):
        self.ids.append(int(tok))
        self.kind.append(kind)
        self.time.append(time)
        self.supervised.append(supervised)

    def add_block(self, sep, codes, kind, time, vocab, supervised):
        self.add(sep, kind, time, supervised)
        for c in codes:
            self.add(vocab.code_id(int(c)), kind, time, supervised)

    def finish(self, layout) -> TokenSequence:
        mask = np.zeros(len(self.ids), dtype=np.int8)
        sup = np.asarray(self.supervised, dtype=bool)
        mask[:-1] = sup[1:]
        return TokenSequence(
            ids=np.asarray(self.ids, dtype=np.int32),
            tag_kind=np.asarray(self.kind, dtype=np.int8),
            tag_time=np.asarray(self.time, dtype=np.int16),
            loss_mask=mask, layout=layout)


def assemble(ep, layout: SequenceLayout, cb: Codebook, vocab: VocabLayout,
             codec: FlowCodecConfig | None = None,
             window: tuple[int, int] | None = None,
             include_instruction: bool = True,
             max_len: int | None = None) -> TokenSequence:
    """Build the token sequence for one (possibly windowed) episode.

    `window=(t0, steps)` assembles the sub-episode starting at frame t0 with
    `steps` transitions; timestep tags are window-relative so supervision
    rules apply unchanged. Raises LengthError when the result would exceed
    max_len.
    """
    if isinstance(ep, Episode):
        ep = TokenizedEpisode.from_episode(ep, cb, codec or FlowCodecConfig())
    t0, steps = (0, ep.steps) if window is None else window
    if t0 < 0 or steps < 0 or t0 + steps > ep.steps:
        raise ValueError(f"window {window} outside episode of {ep.steps} steps")

    b = _Builder()
    b.add(BOS, TAG_SPECIAL)
    b.add(SEP_TEXT, TAG_TEXT)
    if include_instruction:
        for w in ep.instr_words:
            b.add(vocab.text_id(int(w)), TAG_TEXT)

    frames = ep.frame_codes[t0:t0 + steps + 1]
    flows = ep.flow_codes[t0:t0 + steps]
    if layout in (SequenceLayout.INTERLEAVED_COT, SequenceLayout.NO_FLOW_LOSS):
        flow_supervised = layout is SequenceLayout.INTERLEAVED_COT
        for t in range(steps):
            b.add_block(SEP_FRAME, frames[t], TAG_FRAME, t, vocab, t >= 1)
            b.add_block(SEP_FLOW, flows[t], TAG_FLOW, t, vocab,
                        flow_supervised)
        b.add_block(SEP_FRAME, frames[steps], TAG_FRAME, steps, vocab, True)
    elif layout is SequenceLayout.GROUPED:
        for t in range(steps + 1):
            b.add_block(SEP_FRAME, frames[t], TAG_FRAME, t, vocab, t >= 1)
        for t in range(steps):
            b.add_block(SEP_FLOW, flows[t], TAG_FLOW, t, vocab, True)
    elif layout is SequenceLayout.FRAMES_ONLY:
        for t in range(steps + 1):
            b.add_block(SEP_FRAME, frames[t], TAG_FRAME, t, vocab, t >= 1)
    elif layout is SequenceLayout.POLICY:
        for t in range(steps):
            b.add_block(SEP_FRAME, frames[t], TAG_FRAME, t, vocab, False)
            b.add(SEP_ACTION, TAG_ACTION, t, supervised=False)
            b.add(vocab.action_id(int(ep.actions[t0 + t])), TAG_ACTION, t,
                  supervised=True)
    else:
        raise ValueError(f"unhandled layout {layout}")
    b.add(EOS, TAG_SPECIAL)

    seq = b.finish(layout)
    if max_len is not None and len(seq) > max_len:
        raise LengthError(
            f"{layout.name} sequence of {len(seq)} tokens exceeds {max_len}")
    return seq


def wm_sequence_length(steps: int, tokens_per_image: int, n_instr: int,
                       layout: SequenceLayout) -> int:
    """Closed-form assembled length, used to pre-shrink windows."""
    block = 1 + tokens_per_image
    base = 3 + n_instr  # BOS, SEP_TEXT, instr, EOS
    if layout is SequenceLayout.POLICY:
        return base + steps * (block + 2)
    if layout is SequenceLayout.FRAMES_ONLY:
        return base + (steps + 1) * block
    return base + (2 * steps + 1) * block


def max_steps_for_length(max_len: int, tokens_per_image: int, n_instr: int,
                         layout: SequenceLayout) -> int:
    """Largest step count whose assembled sequence fits max_len."""
    steps = 0
    while wm_sequence_length(steps + 1, tokens_per_image, n_instr,
                             layout) <= max_len:
        steps += 1
    return steps


def supervised_target_positions(seq: TokenSequence) -> np.ndarray:
    """Independent re-derivation of the mask from block tags (for checks)."""
    kind = seq.tag_kind
    time = seq.tag_time
    if seq.layout is SequenceLayout.POLICY:
        sup = (kind == TAG_ACTION) & (seq.ids != SEP_ACTION)
    elif seq.layout in (SequenceLayout.FRAMES_ONLY, SequenceLayout.NO_FLOW_LOSS):
        sup = (kind == TAG_FRAME) & (time >= 1)
    else:
        sup = ((kind == TAG_FRAME) & (time >= 1)) | (kind == TAG_FLOW)
    return np.nonzero(sup)[0]
