import math
from dataclasses import replace

import numpy as np
import pytest

from flowcot.arnet import ModelConfig, init_params
from flowcot.errors import ConfigError, DivergenceError
from flowcot.sequences import (
    SequenceLayout, TokenizedEpisode, assemble, default_vocab,
)
from flowcot.training import (
    TrainConfig, TrainData, finetune_policy, policy_loss, train_world_model,
    wm_loss, write_metrics_csv,
)


@pytest.fixture(scope="module")
def vocab(codebook):
    return default_vocab(codebook)


@pytest.fixture(scope="module")
def small_model(vocab):
    return ModelConfig(vocab=vocab, d_model=32, n_layers=2, n_heads=2,
                       d_ff=64, max_seq_len=2048)


@pytest.fixture(scope="module")
def small_params(small_model):
    return init_params(small_model, 0)


@pytest.fixture(scope="module")
def tok_episode(episodes, codebook, codec):
    return TokenizedEpisode.from_episode(episodes[0], codebook, codec)


class TestLosses:
    def test_frames_only_has_zero_flow_term(self, tok_episode, codebook,
                                             vocab, small_model,
                                             small_params):
        seq = assemble(tok_episode, SequenceLayout.FRAMES_ONLY, codebook,
                       vocab, window=(0, 2))
        rep = wm_loss(small_params, small_model, seq, lam=1.0)
        assert rep.flow_term == 0.0
        assert rep.n_flow == 0
        assert rep.total == rep.frame_term

    def test_lambda_weighting_additivity(self, tok_episode, codebook, vocab,
                                         small_model, small_params):
        seq = assemble(tok_episode, SequenceLayout.INTERLEAVED_COT, codebook,
                       vocab, window=(0, 2))
        for lam in (1.0, 0.5, 2.0):
            rep = wm_loss(small_params, small_model, seq, lam=lam)
            assert rep.total == rep.flow_term + lam * rep.frame_term

    def test_untrained_terms_near_ln_vocab(self, tok_episode, codebook,
                                           vocab, small_model, small_params):
        seq = assemble(tok_episode, SequenceLayout.INTERLEAVED_COT, codebook,
                       vocab, window=(0, 2))
        rep = wm_loss(small_params, small_model, seq)
        bound = math.log(vocab.total)
        assert abs(rep.flow_term - bound) < 0.5
        assert abs(rep.frame_term - bound) < 0.5

    def test_no_flow_loss_zeroes_flow_term(self, tok_episode, codebook,
                                           vocab, small_model, small_params):
        seq = assemble(tok_episode, SequenceLayout.NO_FLOW_LOSS, codebook,
                       vocab, window=(0, 2))
        rep = wm_loss(small_params, small_model, seq)
        assert rep.flow_term == 0.0

    def test_policy_loss_ignores_frame_targets(self, tok_episode, codebook,
                                               vocab, small_model,
                                               small_params):
        seq = assemble(tok_episode, SequenceLayout.POLICY, codebook, vocab)
        base = policy_loss(small_params, small_model, seq)
        # Perturb every non-supervised target token (frames, text, EOS).
        edited = assemble(tok_episode, SequenceLayout.POLICY, codebook, vocab)
        mask = edited.loss_mask.astype(bool)
        protected = np.zeros(len(edited), dtype=bool)
        protected[np.nonzero(mask)[0] + 1] = True  # supervised targets
        protected[0] = True
        for i in range(1, len(edited)):
            if not protected[i] and vocab.is_code(int(edited.ids[i])):
                edited.ids[i] = vocab.code_id(
                    (vocab.code_index(int(edited.ids[i])) + 1)
                    % vocab.n_code)
        after = policy_loss(small_params, small_model, edited)
        # Loss depends only on supervised targets given identical context...
        # but editing context tokens changes logits, so compare masks only:
        assert base.n_action == after.n_action == tok_episode.steps

    def test_policy_loss_mask_isolation_exact(self, tok_episode, codebook,
                                              vocab, small_model,
                                              small_params):
        # Editing a non-action *target* while keeping the *context* intact:
        # change the token at an unsupervised target position only via the
        # target array by masking comparison; here we instead verify the
        # gradient-isolation property: zero weight positions contribute no
        # gradient.
        from flowcot.arnet.model import (
            backward_batch, ce_weights_grad, forward_batch,
        )
        seq = assemble(tok_episode, SequenceLayout.POLICY, codebook, vocab)
        ids = seq.ids[None, :].astype(np.int64)
        segs = seq.segments[None, :].astype(np.int64)
        targets = np.zeros_like(ids)
        targets[0, :-1] = ids[0, 1:]
        weights = (seq.loss_mask / max(seq.loss_mask.sum(), 1))[None, :] \
            .astype(np.float32)
        logits, cache = forward_batch(small_params, small_model, ids, segs,
                                      want_cache=True)
        loss_a, _ = ce_weights_grad(logits, targets, weights)
        # perturb targets at masked-out positions
        targets_b = targets.copy()
        off = np.nonzero(weights[0] == 0)[0]
        targets_b[0, off] = (targets_b[0, off] + 1) % vocab.total
        loss_b, _ = ce_weights_grad(logits, targets_b, weights)
        assert loss_a == loss_b

    def test_degenerate_no_actions(self, small_params, small_model, vocab,
                                   codebook, tok_episode):
        seq = assemble(tok_episode, SequenceLayout.POLICY, codebook, vocab,
                       window=(0, 0))
        rep = policy_loss(small_params, small_model, seq)
        assert rep.total == 0.0 and rep.n_action == 0

    def test_hand_two_action_case(self, small_model, vocab):
        # Direct CE check on known logits via the report path.
        from flowcot.arnet.model import masked_ce
        v = vocab.total
        logits = np.zeros((2, v))
        logits[0, vocab.action_id(1)] = math.log(3)
        targets = [vocab.action_id(1), vocab.action_id(2)]
        got = masked_ce(logits, targets, [1, 1])
        p0 = math.exp(math.log(3)) / (math.exp(math.log(3)) + (v - 1))
        p1 = 1.0 / v
        want = (-math.log(p0) - math.log(p1)) / 2
        assert got == pytest.approx(want, abs=1e-9)

    def test_wm_loss_rejects_policy_layout(self, tok_episode, codebook,
                                           vocab, small_model, small_params):
        seq = assemble(tok_episode, SequenceLayout.POLICY, codebook, vocab)
        with pytest.raises(ConfigError):
            wm_loss(small_params, small_model, seq)


class TestTrainingLoop:
    def test_deterministic_metrics(self, train_data, small_model, tmp_path):
        cfg = TrainConfig(steps=6, eval_every=3, batch_size=4, window=1,
                          held_out=6, seed=11)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        train_world_model(train_data, cfg, small_model, out_dir=out_a)
        train_world_model(train_data, cfg, small_model, out_dir=out_b)
        assert (out_a / "metrics.csv").read_bytes() \
            == (out_b / "metrics.csv").read_bytes()
        assert (out_a / "model.fvc").read_bytes() \
            == (out_b / "model.fvc").read_bytes()

    def test_loss_decreases(self, train_data, small_model):
        cfg = TrainConfig(steps=60, eval_every=30, batch_size=4, window=1,
                          held_out=6, lr=1e-3)
        _, _, rows = train_world_model(train_data, cfg, small_model)
        assert rows[-1]["total"] < rows[0]["total"]

    def test_data_fraction_prefix(self, train_data):
        cfg = TrainConfig(data_fraction=0.5, held_out=6)
        pool, held = train_data.split(cfg)
        assert len(held) == 6
        total = len(train_data.episodes) - 6
        assert len(pool) == math.ceil(total * 0.5)
        assert [ep.seed for ep in pool] \
            == [ep.seed for ep in train_data.episodes[:len(pool)]]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_error(self, train_data, small_model):
        cfg = TrainConfig(steps=40, eval_every=40, batch_size=2, window=1,
                          held_out=6, lr=1e18, grad_clip=1e20)
        with pytest.raises(DivergenceError):
            train_world_model(train_data, cfg, small_model)

    def test_policy_finetune_runs_and_evals(self, train_data, small_model,
                                            tmp_path):
        wm_cfg = TrainConfig(steps=4, eval_every=4, batch_size=2, window=1,
                             held_out=6)
        params, mcfg, _ = train_world_model(train_data, wm_cfg, small_model)
        calls = []

        def fake_eval(p, m):
            calls.append(1)
            return 0.25

        pol_cfg = TrainConfig(steps=4, eval_every=2, batch_size=2,
                              policy_window=2, held_out=6)
        _, _, rows = finetune_policy(train_data, pol_cfg, params, mcfg,
                                     out_dir=tmp_path,
                                     eval_success_fn=fake_eval)
        assert len(calls) == 2
        assert all(r["eval_success"] == 0.25 for r in rows)
        assert [r["step"] for r in rows] == sorted(r["step"] for r in rows)

    def test_vocab_mismatch_rejected(self, train_data):
        from flowcot.arnet import VocabLayout
        bad = ModelConfig(vocab=VocabLayout(n_text=2, n_code=3), d_model=8,
                          n_layers=1, n_heads=2, d_ff=16)
        params = init_params(bad, 0)
        cfg = TrainConfig(steps=1)
        with pytest.raises(ConfigError):
            finetune_policy(train_data, cfg, params, bad)

    def test_metrics_csv_format(self, tmp_path):
        rows = [{"step": 1, "total": 0.5, "flow_term": 0.25,
                 "frame_term": 0.25, "action_term": 0.0,
                 "eval_token_acc": 0.75}]
        path = tmp_path / "m.csv"
        write_metrics_csv(path, rows)
        text = path.read_text()
        lines = text.strip().split("\n")
        assert lines[0] == ("step,total,flow_term,frame_term,action_term,"
                            "eval_token_acc,eval_success")
        assert lines[1].startswith("1,0.5,0.25,0.25,0.0,0.75,")
