"""Autoregressive rollouts, prediction scoring, closed-loop policy eval.

World-model rollouts execute the reason-then-predict chain with no teacher
forcing: after the encoded prefix, every context token is model-generated
(tracked by provenance tags and asserted). Generated tokens that violate the
block grammar are coerced to the nearest valid id and counted rather than
failing the rollout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .arnet import DecodeSession, ModelConfig, sample_next
from .arnet.vocab import (
    BOS, SEG_ACTION, SEG_FLOW, SEG_FRAME, SEG_SPECIAL, SEG_TEXT,
    SEP_ACTION, SEP_FLOW, SEP_FRAME, SEP_TEXT,
)
from .errors import ConfigError, ContaminationError
from .flowcodec import FlowCodecConfig, flow_to_rgb, rgb_to_flow, snap_to_lattice
from .sequences import SequenceLayout
from .tokenizer import Codebook, detokenize, tokenize
from .worldsim import (
    Action, Episode, WorldConfig, initial_world, is_success,
    make_instruction, render, step,
)

DIVERGENCE_THRESHOLD = 0.5  # pixel-match rate below this counts as diverged


@dataclass
class RolloutResult:
    predicted_frames: list = field(default_factory=list)
    predicted_flows: list = field(default_factory=list)
    coercion_count: int = 0
    frame_token_acc: list[float] = field(default_factory=list)
    pixel_match: list[float] = field(default_factory=list)
    flow_epe: list[float] = field(default_factory=list)
    divergence_step: float = math.inf


@dataclass
class PolicyEvalReport:
    n_episodes: int
    success_rate: float
    mean_steps_to_success: float
    outcomes: list[dict]


def _wm_layout(header_layout: str) -> SequenceLayout:
    layout = SequenceLayout[header_layout]
    if layout is SequenceLayout.POLICY:
        raise ConfigError("POLICY checkpoint cannot run world-model rollout")
    return layout


class _GenContext:
    """Decode session plus provenance bookkeeping and grammar coercion."""

    def __init__(self, params, mcfg: ModelConfig, temperature: float,
                 rng_base: int):
        self.session = DecodeSession(params, mcfg)
        self.vocab = mcfg.vocab
        self.temperature = temperature
        self.rng_base = rng_base
        self.provenance: list[str] = []
        self.coercions = 0
        self.last_logits = None
        self._draws = 0

    def force(self, ids, segs):
        logits = self.session.append(ids, segs)
        self.provenance.extend(["forced"] * len(ids))
        self.last_logits = logits[-1]

    def _sample(self) -> int:
        self._draws += 1
        return sample_next(self.last_logits, self.temperature,
                           rng_seed=self.rng_base + self._draws)

    def gen_separator(self, sep: int, seg: int) -> int:
        tok = self._sample()
        if tok != sep:
            tok = sep
            self.coercions += 1
        self.last_logits = self.session.append([tok], [seg])[-1]
        self.provenance.append("generated")
        return tok

    def gen_code(self, seg: int) -> int:
        tok = self._sample()
        lo = self.vocab.code_offset
        hi = self.vocab.action_offset - 1
        if not lo <= tok <= hi:
            tok = min(max(tok, lo), hi)  # nearest valid code id
            self.coercions += 1
        self.last_logits = self.session.append([tok], [seg])[-1]
        self.provenance.append("generated")
        return self.vocab.code_index(tok)


def rollout_wm(params, mcfg: ModelConfig, header: dict, cb: Codebook,
               instruction_ids, prefix_frames, horizon: int,
               codec: FlowCodecConfig | None = None, temperature: float = 0.0,
               prefix_flows=None, rng_base: int = 0) -> RolloutResult:
    """Generate `horizon` flow/frame steps after an encoded frame prefix.

    Layouts without flow blocks (FRAMES_ONLY, GROUPED) generate frame blocks
    only and leave predicted_flows empty. Multi-frame prefixes in interleaved
    layouts need the true flows between prefix frames.
    """
    if not prefix_frames:
        raise ConfigError("rollout needs a nonempty frame prefix")
    codec = codec or FlowCodecConfig()
    layout = _wm_layout(header["layout"])
    interleaved = layout in (SequenceLayout.INTERLEAVED_COT,
                             SequenceLayout.NO_FLOW_LOSS)
    ctx = _GenContext(params, mcfg, temperature, rng_base)

    ids = [BOS, SEP_TEXT]
    segs = [SEG_SPECIAL, SEG_TEXT]
    if header.get("train_config", {}).get("include_instructions", True):
        for w in instruction_ids:
            ids.append(mcfg.vocab.text_id(int(w)))
            segs.append(SEG_TEXT)
    grids = [tokenize(f, cb).reshape(-1) for f in prefix_frames]
    if interleaved and len(grids) > 1:
        if prefix_flows is None or len(prefix_flows) != len(grids) - 1:
            raise ConfigError(
                "interleaved prefix of k frames needs k-1 prefix flows")
        flow_grids = [tokenize(flow_to_rgb(f, codec), cb).reshape(-1)
                      for f in prefix_flows]
    for i, g in enumerate(grids):
        ids.append(SEP_FRAME)
        segs.append(SEG_FRAME)
        ids.extend(mcfg.vocab.code_id(int(c)) for c in g)
        segs.extend([SEG_FRAME] * len(g))
        if interleaved and i < len(grids) - 1:
            ids.append(SEP_FLOW)
            segs.append(SEG_FLOW)
            ids.extend(mcfg.vocab.code_id(int(c)) for c in flow_grids[i])
            segs.extend([SEG_FLOW] * len(g))
    ctx.force(ids, segs)
    prefix_len = len(ids)

    n_tok = grids[0].size
    gh = prefix_frames[0].shape[0] // cb.patch_size
    gw = prefix_frames[0].shape[1] // cb.patch_size
    result = RolloutResult()
    for _ in range(horizon):
        if interleaved:
            ctx.gen_separator(SEP_FLOW, SEG_FLOW)
            flow_grid = np.array([ctx.gen_code(SEG_FLOW)
                                  for _ in range(n_tok)], dtype=np.int32)
            flow_img = detokenize(flow_grid.reshape(gh, gw), cb)
            result.predicted_flows.append(
                snap_to_lattice(rgb_to_flow(flow_img, codec)))
        ctx.gen_separator(SEP_FRAME, SEG_FRAME)
        frame_grid = np.array([ctx.gen_code(SEG_FRAME)
                               for _ in range(n_tok)], dtype=np.int32)
        result.predicted_frames.append(
            detokenize(frame_grid.reshape(gh, gw), cb))
    result.coercion_count = ctx.coercions
    assert all(p == "generated" for p in ctx.provenance[prefix_len:]), \
        "teacher forcing leaked into rollout context"
    return result


def score_rollout(pred: RolloutResult, truth: Episode, cb: Codebook,
                  codec: FlowCodecConfig | None = None,
                  prefix_len: int = 1) -> list[dict]:
    """Fill pred's metric lists against ground truth; returns metric rows.

    Step h of the rollout predicts truth.frames[prefix_len + h] and (for
    interleaved layouts) truth.flows[prefix_len - 1 + h].
    """
    codec = codec or FlowCodecConfig()
    rows = []
    pred.frame_token_acc = []
    pred.pixel_match = []
    pred.flow_epe = []
    pred.divergence_step = math.inf
    for h, frame in enumerate(pred.predicted_frames):
        t = prefix_len + h
        true_frame = truth.frames[t]
        true_grid = tokenize(true_frame, cb).reshape(-1)
        pred_grid = tokenize(frame, cb).reshape(-1)
        acc = float((true_grid == pred_grid).mean())
        match = float((frame == true_frame).all(axis=-1).mean())
        row = {"step": h, "frame_token_acc": acc, "pixel_match": match}
        pred.frame_token_acc.append(acc)
        pred.pixel_match.append(match)
        if pred.predicted_flows:
            diff = pred.predicted_flows[h] - truth.flows[t - 1]
            epe = float(np.hypot(diff[..., 0], diff[..., 1]).mean())
            pred.flow_epe.append(epe)
            row["flow_epe"] = epe
        if match < DIVERGENCE_THRESHOLD \
                and pred.divergence_step == math.inf:
            pred.divergence_step = h
        rows.append(row)
    return rows


def run_policy_episode(params, mcfg: ModelConfig, header: dict, cb: Codebook,
                       world_cfg: WorldConfig, seed: int, max_steps: int,
                       codec: FlowCodecConfig | None = None):
    """Closed loop: observe, decode one action greedily, execute.

    Context is the policy sequence; when the checkpoint was trained with a
    policy window, only the most recent window of observation/action pairs
    is kept. Returns (success, steps_taken, invalid_action_count).
    """
    if SequenceLayout[header["layout"]] is not SequenceLayout.POLICY:
        raise ConfigError("world-model checkpoint cannot run policy episodes")
    codec = codec or FlowCodecConfig()
    tcfg = header.get("train_config", {})
    window = tcfg.get("policy_window")
    include_instr = tcfg.get("include_instructions", True)
    vocab = mcfg.vocab

    s = initial_world(world_cfg, seed)
    instr = make_instruction(s)
    prefix_ids = [BOS, SEP_TEXT]
    prefix_segs = [SEG_SPECIAL, SEG_TEXT]
    if include_instr:
        for w in instr.ids:
            prefix_ids.append(vocab.text_id(w))
            prefix_segs.append(SEG_TEXT)

    history: list[tuple[list[int], int]] = []  # (frame block ids, action id)
    session = None
    invalid = 0
    steps_taken = 0
    if window is None:
        session = DecodeSession(params, mcfg)
        session.append(prefix_ids, prefix_segs)
    for _ in range(max_steps):
        if is_success(s, world_cfg):
            break
        grid = tokenize(render(s, world_cfg), cb).reshape(-1)
        obs_ids = [SEP_FRAME] + [vocab.code_id(int(c)) for c in grid] \
            + [SEP_ACTION]
        obs_segs = [SEG_FRAME] * (len(grid) + 1) + [SEG_ACTION]
        if window is None:
            logits = session.append(obs_ids, obs_segs)
        else:
            session = DecodeSession(params, mcfg)
            ids = list(prefix_ids)
            segs = list(prefix_segs)
            for block, act in history[-(window - 1):] if window > 1 else []:
                ids.extend(block + [act])
                segs.extend([SEG_FRAME] * (len(block) - 1)
                            + [SEG_ACTION, SEG_ACTION])
            ids.extend(obs_ids)
            segs.extend(obs_segs)
            logits = session.append(ids, segs)
        tok = int(np.argmax(logits[-1]))
        if vocab.is_action(tok):
            action = Action(vocab.action_index(tok))
        else:
            action = Action.NOOP
            invalid += 1
        act_tok = vocab.action_id(int(action))
        if window is None:
            session.append([act_tok], [SEG_ACTION])
        else:
            history.append((obs_ids, act_tok))
        s = step(s, action, world_cfg)
        steps_taken += 1
    return is_success(s, world_cfg), steps_taken, invalid


def eval_policy(params, mcfg: ModelConfig, header: dict, cb: Codebook,
                world_cfg: WorldConfig, seeds, max_steps: int | None = None,
                codec: FlowCodecConfig | None = None) -> PolicyEvalReport:
    """Aggregate closed-loop episodes; seeds must avoid the training set."""
    train_seeds = set(header.get("train_seeds", ()))
    overlap = train_seeds.intersection(int(x) for x in seeds)
    if overlap:
        raise ContaminationError(
            f"eval seeds overlap training manifest: {sorted(overlap)[:5]}")
    max_steps = world_cfg.horizon_max if max_steps is None else max_steps
    outcomes = []
    successes = 0
    steps_acc = []
    for seed in seeds:
        ok, n, invalid = run_policy_episode(
            params, mcfg, header, cb, world_cfg, int(seed), max_steps, codec)
        outcomes.append({"seed": int(seed), "success": ok, "steps": n,
                         "invalid_actions": invalid})
        if ok:
            successes += 1
            steps_acc.append(n)
    n_ep = len(outcomes)
    return PolicyEvalReport(
        n_episodes=n_ep,
        success_rate=successes / n_ep if n_ep else 0.0,
        mean_steps_to_success=(sum(steps_acc) / len(steps_acc)
                               if steps_acc else math.nan),
        outcomes=outcomes)
