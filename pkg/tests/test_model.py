from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_difference, max_relative_error
from slucost.corpus import CorpusSpec, generate_corpus
from slucost.model import (
    ASR_CHARS,
    ENCODER_ONLY,
    FULL,
    SLU_CONCEPTS,
    CheckpointError,
    ModelConfig,
    StageHyper,
    TrainingDiverged,
    TrainingError,
    decode,
    encode,
    init_model,
    load_checkpoint,
    train_stage,
    transfer_parameters,
)
from slucost.model.network import decoder_forward, decoder_states, loss_and_grads

TINY = ModelConfig(feature_dim=4, vocab_asr=6, vocab_slu=5, hidden_dim=6, decoder_dim=5)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusSpec(n_train=24, n_dev=6, n_test=6, feature_dim=8, seed=5))


def small_config(corpus, **kw):
    return ModelConfig(feature_dim=corpus.feature_dim, vocab_asr=corpus.vocab_asr, vocab_slu=corpus.vocab_slu,
                       hidden_dim=12, decoder_dim=10, **kw)


def bitwise_equal(a, b):
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


class TestInit:
    def test_deterministic(self):
        a, b = init_model(TINY), init_model(TINY)
        assert all(bitwise_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)

    def test_seed_changes_weights(self):
        a, b = init_model(TINY), init_model(replace(TINY, seed=1))
        assert not np.array_equal(a.tensors["enc.0.W"], b.tensors["enc.0.W"])

    def test_param_count(self):
        ckpt = init_model(TINY)
        assert ckpt.param_count == sum(int(np.prod(s)) for s in TINY.tensor_shapes().values()) > 0

    def test_scheme(self):
        ckpt = init_model(TINY)
        for name, t in ckpt.tensors.items():
            assert t.dtype == np.float32
            if t.ndim == 1:
                assert not t.any()
            else:
                assert np.abs(t).max() <= 1 / np.sqrt(t.shape[0])

    @pytest.mark.parametrize("kw", [{"hidden_dim": 0}, {"vocab_slu": 1}, {"pyramid_factor": 3}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            replace(TINY, **kw)

    def test_save_load_round_trip(self, tmp_path):
        ckpt = init_model(TINY)
        loaded = load_checkpoint(ckpt.save(tmp_path / "m"))
        assert loaded.config == ckpt.config and loaded.provenance == ckpt.provenance
        assert all(bitwise_equal(ckpt.tensors[k], loaded.tensors[k]) for k in ckpt.tensors)

    def test_truncated_blob(self, tmp_path):
        path = init_model(TINY).save(tmp_path / "m")
        blob = path / "tensors.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)


class TestEncodeDecode:
    @pytest.mark.parametrize("T, expected", [(8, 2), (7, 2), (1, 1), (9, 3)])
    def test_output_length(self, T, expected):
        H = encode(init_model(TINY), np.ones((T, 4)))
        assert H.shape == (expected, TINY.hidden_dim)

    def test_zero_input_finite(self):
        H = encode(init_model(TINY), np.zeros((5, 4)))
        assert np.isfinite(H).all() and np.isfinite(decode(init_model(TINY), H)).all()

    def test_empty_utterance(self):
        with pytest.raises(ValueError, match="empty utterance"):
            encode(init_model(TINY), np.zeros((0, 4)))

    def test_dim_mismatch(self):
        ckpt = init_model(TINY)
        with pytest.raises(ValueError):
            encode(ckpt, np.zeros((4, 3)))
        with pytest.raises(ValueError):
            decode(ckpt, np.zeros((2, TINY.hidden_dim + 1)))

    def test_decode_shape_and_attention(self):
        ckpt = init_model(replace(TINY, seed=2))
        H = encode(ckpt, np.random.default_rng(0).normal(size=(21, 4)))
        logits, A, A2 = decode(ckpt, H, return_attention=True)
        assert logits.shape == (H.shape[0], TINY.vocab_slu)
        assert np.allclose(A.sum(axis=1), 1.0, atol=1e-6)
        assert np.allclose(A2.sum(axis=1), 1.0, atol=1e-6)
        assert not np.triu(A2, k=1).any()

    def test_causal_mask_by_perturbation(self):
        rng = np.random.default_rng(3)
        ckpt = init_model(TINY)
        params = {k: v.astype(np.float64) + rng.normal(scale=0.3, size=v.shape) for k, v in ckpt.tensors.items()}
        H = rng.normal(size=(1, 7, TINY.hidden_dim))
        S = decoder_states(params, H)
        base, _ = decoder_forward(params, H, np.array([7]), states=S)
        for t in range(6):
            S2 = S.copy()
            S2[:, t + 1:] += rng.normal(size=S2[:, t + 1:].shape)
            out, _ = decoder_forward(params, H, np.array([7]), states=S2)
            assert np.array_equal(out[0, : t + 1], base[0, : t + 1])
            assert not np.allclose(out[0, t + 1:], base[0, t + 1:])

    def test_pure_function(self):
        ckpt = init_model(TINY)
        x = np.random.default_rng(1).normal(size=(6, 4))
        assert np.array_equal(decode(ckpt, encode(ckpt, x)), decode(ckpt, encode(ckpt, x)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 40), st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
    def test_finite_on_finite_inputs(self, T, scale, seed):
        ckpt = init_model(TINY)
        x = np.random.default_rng(seed).normal(scale=scale, size=(T, 4))
        H = encode(ckpt, x)
        assert np.isfinite(H).all() and np.isfinite(decode(ckpt, H)).all()


def perturbed_params(seed, config):
    rng = np.random.default_rng(seed)
    return {k: v.astype(np.float64) + rng.normal(scale=0.3, size=v.shape)
            for k, v in init_model(replace(config, seed=seed)).tensors.items()}


def check_gradients(seed, mode, vocab):
    config = ModelConfig(feature_dim=3, vocab_asr=5, vocab_slu=4, hidden_dim=3, decoder_dim=3)
    rng = np.random.default_rng(1000 + seed)
    params = perturbed_params(seed, config)
    feats = [rng.normal(size=(int(rng.integers(5, 9)), 3)) for _ in range(2)]
    targets = [[int(rng.integers(1, vocab))] for _ in feats]
    _, grads = loss_and_grads(params, config, feats, targets, mode)
    worst = 0.0
    for name, g in grads.items():
        def f(x, name=name):
            return loss_and_grads({**params, name: x}, config, feats, targets, mode)[0]

        worst = max(worst, max_relative_error(g, central_difference(f, params[name].copy())))
    return worst


@pytest.mark.parametrize("seed", range(20))
def test_full_model_gradient_matches_finite_differences(seed):
    assert check_gradients(seed, "decoder", 4) < 1e-3


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("mode, vocab", [("asr_head", 5), ("slu_head", 4)])
def test_head_gradient_matches_finite_differences(seed, mode, vocab):
    assert check_gradients(seed, mode, vocab) < 1e-3


class TestTransfer:
    def test_identical_configs(self):
        src = init_model(replace(TINY, seed=9))
        dst, moved = transfer_parameters(src, replace(TINY, seed=4))
        assert sorted(moved) == sorted(src.tensors)
        assert all(bitwise_equal(src.tensors[k], dst.tensors[k]) for k in src.tensors)
        assert dst.provenance[-1]["op"] == "transfer"

    def test_vocab_change_reinitializes_output_projections(self):
        src = init_model(ModelConfig(feature_dim=4, vocab_asr=30, vocab_slu=30, seed=1))
        dst_config = ModelConfig(feature_dim=4, vocab_asr=30, vocab_slu=77, seed=2)
        dst, moved = transfer_parameters(src, dst_config)
        fresh = init_model(dst_config)
        reinit = set(dst.tensors) - set(moved)
        assert reinit == {"slu_head.W", "slu_head.b", "dec.out.W", "dec.out.b"}
        for k in moved:
            assert bitwise_equal(dst.tensors[k], src.tensors[k])
        for k in reinit:
            assert bitwise_equal(dst.tensors[k], fresh.tensors[k])

    def test_disjoint_architectures(self):
        other = ModelConfig(feature_dim=5, vocab_asr=7, vocab_slu=6, hidden_dim=7, decoder_dim=6, seed=3)
        dst, moved = transfer_parameters(init_model(TINY), other)
        fresh = init_model(other)
        assert moved == []
        assert all(bitwise_equal(dst.tensors[k], fresh.tensors[k]) for k in fresh.tensors)

    def test_zero_steps_leave_transferred_tensors(self, corpus):
        src = init_model(small_config(corpus, seed=8))
        dst, moved = transfer_parameters(src, small_config(corpus))
        out = train_stage(dst, corpus["train"], SLU_CONCEPTS, FULL, StageHyper(epochs=0)).checkpoint
        assert all(bitwise_equal(out.tensors[k], src.tensors[k]) for k in moved)


class TestTrainStage:
    def test_no_samples(self, corpus):
        with pytest.raises(TrainingError, match="no samples"):
            train_stage(init_model(small_config(corpus)), [], SLU_CONCEPTS, FULL, StageHyper(epochs=1))

    def test_label_vocabulary_checked(self, corpus):
        config = replace(small_config(corpus), vocab_slu=2)
        with pytest.raises(TrainingError, match="vocabulary"):
            train_stage(init_model(config), corpus["train"], SLU_CONCEPTS, FULL, StageHyper(epochs=1))

    def test_full_scope_needs_slu_objective(self, corpus):
        with pytest.raises(TrainingError):
            train_stage(init_model(small_config(corpus)), corpus["train"], ASR_CHARS, FULL)

    @pytest.mark.parametrize("objective, touched", [(ASR_CHARS, "asr_head."), (SLU_CONCEPTS, "slu_head.")])
    def test_encoder_only_scope(self, corpus, objective, touched):
        start = init_model(small_config(corpus))
        out = train_stage(start, corpus["train"][:8], objective, ENCODER_ONLY, StageHyper(epochs=1)).checkpoint
        for name, t in out.tensors.items():
            changed = not bitwise_equal(t, start.tensors[name])
            assert changed == (name.startswith("enc.") or name.startswith(touched)), name

    def test_deterministic(self, corpus):
        hyper = StageHyper(epochs=2, seed=4)
        a = train_stage(init_model(small_config(corpus)), corpus["train"], SLU_CONCEPTS, FULL, hyper, dev=corpus["dev"])
        b = train_stage(init_model(small_config(corpus)), corpus["train"], SLU_CONCEPTS, FULL, hyper, dev=corpus["dev"])
        assert a.curve == b.curve
        assert all(bitwise_equal(a.checkpoint.tensors[k], b.checkpoint.tensors[k]) for k in a.checkpoint.tensors)

    def test_thirty_epochs_reduce_loss(self, corpus):
        # seed 0: mean train loss 14.2 in epoch 1, about 5.5 by epoch 30
        result = train_stage(init_model(small_config(corpus)), corpus["train"], SLU_CONCEPTS, FULL,
                             StageHyper(epochs=30, dropout=0.1))
        losses = [p["train_loss"] for p in result.curve]
        assert len(losses) == 30
        assert losses[-1] < 0.6 * losses[0]

    def test_dev_selection_recorded(self, corpus):
        result = train_stage(init_model(small_config(corpus)), corpus["train"], ASR_CHARS, ENCODER_ONLY,
                             StageHyper(epochs=3), dev=corpus["dev"])
        errors = [p["dev_error"] for p in result.curve]
        assert result.checkpoint.provenance[-1]["selected_epoch"] == 1 + int(np.argmin(errors))

    def test_divergence_carries_last_finite_checkpoint(self, corpus):
        bad = replace(corpus["train"][0], features=np.full_like(corpus["train"][0].features, np.nan))
        start = init_model(small_config(corpus))
        with pytest.raises(TrainingDiverged) as info:
            train_stage(start, [bad], SLU_CONCEPTS, FULL, StageHyper(epochs=1))
        ckpt = info.value.checkpoint
        assert all(np.isfinite(t).all() for t in ckpt.tensors.values())
        assert all(bitwise_equal(ckpt.tensors[k], start.tensors[k]) for k in start.tensors)
