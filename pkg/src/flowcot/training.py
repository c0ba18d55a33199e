"""Two-stage training: world-model pre-training and policy fine-tuning.

Both stages share one loop: deterministic shuffled batching from the config
seed, windowed sequence assembly, per-term mean cross-entropy with the
world-model total being flow_term + lambda * frame_term, global-norm clipped
Adam updates, and periodic evaluation rows written to a metrics CSV.

Determinism contract: given the same dataset, codebook and TrainConfig, a
rerun produces bit-identical parameters and metrics (fixed reduction orders
everywhere; the batch RNG stream does not depend on the layout being
trained, so ablation arms see identical episode/window draws).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .arnet import (
    AdamState, ModelConfig, adam_step, backward_batch, ce_weights_grad,
    clip_global_norm, forward_batch, init_params, save_checkpoint,
)
from .arnet.vocab import PAD, SEG_SPECIAL
from .errors import ConfigError, DivergenceError, LengthError
from .flowcodec import FlowCodecConfig
from .sequences import (
    TAG_ACTION, TAG_FLOW, TAG_FRAME, SequenceLayout, TokenSequence,
    TokenizedEpisode, WM_LAYOUTS, assemble, default_vocab,
    max_steps_for_length,
)
from .tokenizer import Codebook
from .worldsim import Episode, WorldConfig

METRIC_COLUMNS = ("step", "total", "flow_term", "frame_term", "action_term",
                  "eval_token_acc", "eval_success")


@dataclass
class TrainConfig:
    layout: SequenceLayout = SequenceLayout.INTERLEAVED_COT
    lam: float = 1.0                  # frame-loss weight in the WM total
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    batch_size: int = 8
    steps: int = 1000
    eval_every: int = 100
    seed: int = 0
    data_fraction: float = 1.0        # seed-ordered prefix of the train pool
    window: int | None = None         # WM transitions per training sequence
    policy_window: int | None = None  # obs/action pairs per policy sequence
    include_instructions: bool = True
    held_out: int = 32                # episodes reserved for eval (tail)
    eval_episodes: int = 24           # closed-loop rollouts per policy eval
    eval_seed_base: int = 10_000_000  # world seeds for closed-loop eval
    eval_on_train: bool = False       # evaluate on the training pool instead
    # Early stop, checked at eval points against the emitted row: both bounds
    # must hold (unset bounds are ignored; everything unset = run all steps).
    stop_below_loss: float | None = None
    stop_at_token_acc: float | None = None

    def __post_init__(self):
        if not 0 < self.data_fraction <= 1:
            raise ConfigError("data_fraction must be in (0, 1]")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 1:
            raise ConfigError("invalid batch/step configuration")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["layout"] = self.layout.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["layout"] = SequenceLayout.from_name(d["layout"])
        return cls(**d)


@dataclass
class LossReport:
    total: float = 0.0
    flow_term: float = 0.0
    frame_term: float = 0.0
    action_term: float = 0.0
    n_flow: int = 0
    n_frame: int = 0
    n_action: int = 0


@dataclass
class TrainData:
    """Dataset bundle: world config, tokenized episodes, codebook, codec."""
    world_cfg: WorldConfig
    episodes: list[TokenizedEpisode]
    codebook: Codebook
    codec: FlowCodecConfig = field(default_factory=FlowCodecConfig)
    seeds: list[int] = field(default_factory=list)

    @classmethod
    def prepare(cls, world_cfg: WorldConfig, episodes: list[Episode],
                cb: Codebook,
                codec: FlowCodecConfig | None = None) -> "TrainData":
        codec = codec or FlowCodecConfig()
        toks = [TokenizedEpisode.from_episode(ep, cb, codec)
                for ep in episodes]
        return cls(world_cfg=world_cfg, episodes=toks, codebook=cb,
                   codec=codec, seeds=[ep.seed for ep in episodes])

    def split(self, cfg: TrainConfig):
        """(train pool after data_fraction, held-out tail)."""
        held = min(cfg.held_out, max(0, len(self.episodes) - 1))
        cut = len(self.episodes) - held
        pool = self.episodes[:cut]
        n = math.ceil(len(pool) * cfg.data_fraction)
        return pool[:n], self.episodes[cut:]


def _term_weights(seq_batch: list[TokenSequence], vocab, lam: float,
                  max_len: int, dtype):
    """Pad a batch and derive per-position CE weights for each loss term.

    Position i predicts the token at i+1; a target's term is decided by its
    block tag. Means are taken over the whole batch per term.
    """
    b = len(seq_batch)
    s = max(len(q) for q in seq_batch)
    ids = np.full((b, s), PAD, dtype=np.int64)
    segs = np.full((b, s), SEG_SPECIAL, dtype=np.int64)
    targets = np.zeros((b, s), dtype=np.int64)
    term = np.zeros((b, s), dtype=np.int8)  # 0 none, 1 flow, 2 frame, 3 action
    for j, q in enumerate(seq_batch):
        n = len(q)
        ids[j, :n] = q.ids
        segs[j, :n] = q.segments
        mask = q.loss_mask.astype(bool)
        tgt_kind = np.zeros(n, dtype=np.int8)
        tgt_kind[:-1] = q.tag_kind[1:]
        targets[j, :n - 1] = q.ids[1:]
        sel = mask
        term[j, :n][sel & (tgt_kind == TAG_FLOW)] = 1
        term[j, :n][sel & (tgt_kind == TAG_FRAME)] = 2
        term[j, :n][sel & (tgt_kind == TAG_ACTION)] = 3
    counts = {k: int((term == k).sum()) for k in (1, 2, 3)}
    weights = np.zeros((b, s), dtype=dtype)
    if counts[1]:
        weights[term == 1] = 1.0 / counts[1]
    if counts[2]:
        weights[term == 2] = lam / counts[2]
    if counts[3]:
        weights[term == 3] = 1.0 / counts[3]
    return ids, segs, targets, weights, term, counts


def _term_report(logits, targets, term, counts, lam) -> LossReport:
    """Per-term mean CE in float64 from already-computed logits."""
    from .arnet.model import log_softmax
    rep = LossReport(n_flow=counts[1], n_frame=counts[2], n_action=counts[3])
    if not any(counts.values()):
        return rep
    sel = term != 0
    lp = log_softmax(np.asarray(logits[sel], dtype=np.float64))
    ce = -lp[np.arange(lp.shape[0]), targets[sel]]
    kind = term[sel]
    if counts[1]:
        rep.flow_term = float(ce[kind == 1].mean())
    if counts[2]:
        rep.frame_term = float(ce[kind == 2].mean())
    if counts[3]:
        rep.action_term = float(ce[kind == 3].mean())
    if counts[3]:
        rep.total = rep.action_term
    else:
        rep.total = rep.flow_term + lam * rep.frame_term
    return rep


def wm_loss(params, mcfg: ModelConfig, seq: TokenSequence,
            lam: float = 1.0) -> LossReport:
    """Eq.-style world-model loss: flow_term + lambda * frame_term."""
    if seq.layout not in WM_LAYOUTS:
        raise ConfigError(f"{seq.layout.name} is not a world-model layout")
    return _single_loss(params, mcfg, seq, lam)


def policy_loss(params, mcfg: ModelConfig, seq: TokenSequence) -> LossReport:
    """Action-token-only cross entropy."""
    if seq.layout is not SequenceLayout.POLICY:
        raise ConfigError("policy_loss requires the POLICY layout")
    return _single_loss(params, mcfg, seq, 0.0)


def _single_loss(params, mcfg, seq, lam) -> LossReport:
    ids, segs, targets, _, term, counts = _term_weights(
        [seq], mcfg.vocab, lam, mcfg.max_seq_len, params["tok_emb"].dtype)
    logits, _ = forward_batch(params, mcfg, ids, segs)
    return _term_report(logits, targets, term, counts, lam)


class _BatchSampler:
    """Epoch-permutation stream plus window draws, deterministic in seed."""

    def __init__(self, n_items: int, seed: int):
        self.rng = np.random.Generator(
            np.random.Philox(key=seed & ((1 << 64) - 1)))
        self.n = n_items
        self._order: list[int] = []

    def draw(self, batch_size: int, window_of) -> list[tuple[int, int]]:
        out = []
        for _ in range(batch_size):
            if not self._order:
                self._order = list(self.rng.permutation(self.n))
            idx = int(self._order.pop(0))
            span = window_of(idx)
            t0 = int(self.rng.integers(0, span + 1))
            out.append((idx, t0))
        return out


def _assemble_training_batch(pool, picks, layout, cb, vocab, codec, cfg,
                             mcfg) -> list[TokenSequence]:
    window = cfg.policy_window if layout is SequenceLayout.POLICY \
        else cfg.window
    n_instr = len(pool[0].instr_words) if cfg.include_instructions else 0
    tok_per_img = pool[0].frame_codes.shape[1]
    fit = max_steps_for_length(mcfg.max_seq_len, tok_per_img, n_instr, layout)
    seqs = []
    for idx, t0 in picks:
        ep = pool[idx]
        steps = ep.steps if window is None else min(window, ep.steps)
        steps = min(steps, fit)
        if steps < 1:
            raise LengthError("even a single transition exceeds max_seq_len")
        t0 = min(t0, ep.steps - steps)
        seqs.append(assemble(
            ep, layout, cb, vocab, codec, window=(t0, steps),
            include_instruction=cfg.include_instructions,
            max_len=mcfg.max_seq_len))
    return seqs


def _format_value(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, rows: list[dict]) -> None:
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(_format_value(row.get(c))
                              for c in METRIC_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def held_out_token_accuracy(params, mcfg, held, layout, cb, vocab, codec,
                            cfg) -> float:
    """Teacher-forced accuracy on supervised frame targets (action targets
    for POLICY) over the held-out episodes, assembled from step 0."""
    if not held:
        return float("nan")
    want = TAG_ACTION if layout is SequenceLayout.POLICY else TAG_FRAME
    correct = 0
    total = 0
    for ep in held:
        window = cfg.policy_window if layout is SequenceLayout.POLICY \
            else cfg.window
        steps = ep.steps if window is None else min(window, ep.steps)
        n_instr = len(ep.instr_words) if cfg.include_instructions else 0
        fit = max_steps_for_length(mcfg.max_seq_len,
                                   ep.frame_codes.shape[1], n_instr, layout)
        seq = assemble(ep, layout, cb, vocab, codec,
                       window=(0, min(steps, fit)),
                       include_instruction=cfg.include_instructions,
                       max_len=mcfg.max_seq_len)
        logits, _ = forward_batch(params, mcfg, seq.ids[None, :],
                                  seq.segments[None, :])
        pred = logits[0].argmax(axis=-1)
        tgt_kind = np.zeros(len(seq), dtype=np.int8)
        tgt_kind[:-1] = seq.tag_kind[1:]
        sel = (seq.loss_mask.astype(bool)) & (tgt_kind == want)
        idx = np.nonzero(sel)[0]
        correct += int((pred[idx] == seq.ids[idx + 1]).sum())
        total += len(idx)
    return correct / total if total else float("nan")


def _run_training(data: TrainData, cfg: TrainConfig, mcfg: ModelConfig,
                  params, layout: SequenceLayout, out_dir,
                  eval_success_fn=None, log=None):
    """Shared loop. Returns (params, metrics_rows)."""
    pool, held = data.split(cfg)
    if not pool:
        raise ConfigError("empty training pool")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    vocab = mcfg.vocab
    state = AdamState.init(params)
    sampler = _BatchSampler(len(pool), cfg.seed)
    window = cfg.policy_window if layout is SequenceLayout.POLICY \
        else cfg.window

    def span_of(idx):
        ep = pool[idx]
        steps = ep.steps if window is None else min(window, ep.steps)
        return max(0, ep.steps - steps)

    if cfg.eval_on_train:
        held = pool
    rows: list[dict] = []
    acc_report = LossReport()
    acc_steps = 0
    extra = _checkpoint_extra(data, cfg, layout)

    def emit_eval(step_no, params):
        nonlocal acc_report, acc_steps
        denom = max(acc_steps, 1)
        row = {
            "step": step_no,
            "total": acc_report.total / denom,
            "flow_term": acc_report.flow_term / denom,
            "frame_term": acc_report.frame_term / denom,
            "action_term": acc_report.action_term / denom,
            "eval_token_acc": held_out_token_accuracy(
                params, mcfg, held, layout, data.codebook, vocab,
                data.codec, cfg),
        }
        if eval_success_fn is not None:
            row["eval_success"] = eval_success_fn(params, mcfg)
        rows.append(row)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "model.fvc", params, mcfg,
                            step=step_no, extra=extra)
            write_metrics_csv(Path(out_dir) / "metrics.csv", rows)
        if log:
            log(f"step {step_no}: " + " ".join(
                f"{k}={row[k]:.4f}" for k in
                ("total", "flow_term", "frame_term", "action_term",
                 "eval_token_acc")
                if isinstance(row.get(k), float)
                and not math.isnan(row[k])))
        acc_report = LossReport()
        acc_steps = 0
        return row

    def should_stop(row) -> bool:
        if cfg.stop_below_loss is None and cfg.stop_at_token_acc is None:
            return False
        if cfg.stop_below_loss is not None \
                and not row["total"] < cfg.stop_below_loss:
            return False
        if cfg.stop_at_token_acc is not None \
                and not row["eval_token_acc"] >= cfg.stop_at_token_acc:
            return False
        return True

    for step_no in range(1, cfg.steps + 1):
        picks = sampler.draw(cfg.batch_size, span_of)
        seqs = _assemble_training_batch(pool, picks, layout, data.codebook,
                                        vocab, data.codec, cfg, mcfg)
        ids, segs, targets, weights, term, counts = _term_weights(
            seqs, vocab, cfg.lam, mcfg.max_seq_len, params["tok_emb"].dtype)
        logits, cache = forward_batch(params, mcfg, ids, segs,
                                      want_cache=True)
        report = _term_report(logits, targets, term, counts, cfg.lam)
        if not math.isfinite(report.total):
            raise DivergenceError(
                f"non-finite loss at step {step_no}"
                + ("" if out_dir is None
                   else f"; last good checkpoint kept in {out_dir}"))
        _, dlogits = ce_weights_grad(logits, targets, weights)
        grads = backward_batch(params, mcfg, cache, dlogits)
        del cache, logits, dlogits
        clip_global_norm(grads, cfg.grad_clip)
        adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

        acc_report.total += report.total
        acc_report.flow_term += report.flow_term
        acc_report.frame_term += report.frame_term
        acc_report.action_term += report.action_term
        acc_steps += 1
        if step_no % cfg.eval_every == 0 or step_no == cfg.steps:
            row = emit_eval(step_no, params)
            if should_stop(row):
                break
    if cfg.steps == 0:
        emit_eval(0, params)
    return params, rows


def _checkpoint_extra(data: TrainData, cfg: TrainConfig,
                      layout: SequenceLayout) -> dict:
    return {
        "layout": layout.name,
        "train_config": cfg.to_dict(),
        "world_config": data.world_cfg.to_dict(),
        "codebook_hash": data.codebook.content_hash,
        "sigma": data.codec.sigma,
        "train_seeds": list(data.seeds),
    }


def train_world_model(data: TrainData, cfg: TrainConfig,
                      mcfg: ModelConfig | None = None, out_dir=None,
                      log=None):
    """Stage 1: next-token training on a world-model layout.

    Returns (params, model_cfg, metrics_rows); writes model.fvc and
    metrics.csv under out_dir when given.
    """
    if cfg.layout not in WM_LAYOUTS:
        raise ConfigError(f"{cfg.layout.name} is not a world-model layout")
    if mcfg is None:
        mcfg = ModelConfig(vocab=default_vocab(data.codebook))
    params = init_params(mcfg, cfg.seed)
    params, rows = _run_training(data, cfg, mcfg, params, cfg.layout,
                                 out_dir, log=log)
    return params, mcfg, rows


def finetune_policy(data: TrainData, cfg: TrainConfig, init_params_or_ckpt,
                    mcfg: ModelConfig | None = None, out_dir=None,
                    log=None, eval_success_fn=None):
    """Stage 2: action-only fine-tuning from pre-trained weights.

    `init_params_or_ckpt` is either a params dict (with mcfg) or a
    checkpoint path. eval_success_fn(params, mcfg) -> float plugs in
    closed-loop evaluation at each eval point.
    """
    from .arnet import load_checkpoint
    if isinstance(init_params_or_ckpt, (str, Path)):
        params, mcfg, _ = load_checkpoint(init_params_or_ckpt)
        params = {k: v.copy() for k, v in params.items()}
    else:
        if mcfg is None:
            raise ConfigError("mcfg required when passing raw params")
        params = {k: v.copy() for k, v in init_params_or_ckpt.items()}
    if mcfg.vocab != default_vocab(data.codebook):
        raise ConfigError("checkpoint vocab layout does not match dataset")
    cfg = replace(cfg, layout=SequenceLayout.POLICY)
    params, rows = _run_training(data, cfg, mcfg, params,
                                 SequenceLayout.POLICY, out_dir,
                                 eval_success_fn=eval_success_fn, log=log)
    return params, mcfg, rows
