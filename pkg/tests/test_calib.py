import numpy as np
import pytest

from fang.calib import (
    EVAL_CORPUS,
    TRAIN_CORPUS,
    capture_all,
    detokenize,
    load_corpus,
    refresh_forward,
    sample_calibration,
    save_captures,
    tokenize,
)
from fang.errors import InputError
from fang.model import apply_neuron_mask, forward, forward_backward
from fang.numcore import archive_read


def test_tokenizer_roundtrip():
    text = "héllo\nworld\x00"
    ids = tokenize(text)
    assert ids.min() >= 3 and ids.max() < 259
    assert detokenize(ids).decode("utf-8") == text
    assert detokenize([1, *ids, 2, 0]).decode("utf-8") == text


def test_builtin_corpora_load():
    train, ev = load_corpus(TRAIN_CORPUS), load_corpus(EVAL_CORPUS)
    assert train.size > 100_000 and ev.size > 16_384


def test_empty_corpus(tmp_path):
    (tmp_path / "e.txt").write_bytes(b"")
    with pytest.raises(InputError):
        load_corpus(tmp_path / "e.txt")


class TestSampling:
    def test_seeded_and_in_range(self):
        corpus = np.arange(1000) % 250 + 3
        a = sample_calibration(corpus, 5, 20, seed=3)
        b = sample_calibration(corpus, 5, 20, seed=3)
        np.testing.assert_array_equal(a.sequences, b.sequences)
        for seq, off in zip(a.sequences, a.offsets):
            np.testing.assert_array_equal(seq, corpus[off : off + 20])
        assert a.sequences.shape == (5, 20)

    def test_exact_length_corpus(self):
        corpus = np.arange(10) + 3
        cs = sample_calibration(corpus, 3, 10, seed=0)
        assert (cs.offsets == 0).all()

    def test_too_short(self):
        with pytest.raises(InputError):
            sample_calibration(np.arange(5) + 3, 1, 6, seed=0)


class TestCapture:
    def test_columns_follow_sequence_order(self, small_model):
        corpus = tokenize("the calibration text is long enough to sample a few windows from it " * 4)
        cs = sample_calibration(corpus, 3, 12, seed=1)
        caps = capture_all(small_model, cs)
        assert caps[0].n_tokens == 3 * 11
        _, fwd, grads = forward_backward(small_model, cs.sequences[1])
        np.testing.assert_array_equal(caps[1].hidden[:, 11:22], fwd[1].hidden[:, :-1])
        np.testing.assert_array_equal(caps[1].grad[:, 11:22], grads[1])

    def test_refresh_matches_fresh_forward(self, small_model):
        corpus = tokenize("refresh after pruning a layer keeps gradients " * 4)
        cs = sample_calibration(corpus, 2, 10, seed=0)
        caps = capture_all(small_model, cs)
        pruned = apply_neuron_mask(small_model, 0, np.arange(48) < 12)
        new = refresh_forward(pruned, cs, caps, 1)
        assert new[0] is caps[0]
        _, fwd = forward(pruned, cs.sequences[0], capture=True)
        np.testing.assert_array_equal(new[1].ffn_input[:, :9], fwd[1].ffn_input[:, :-1])
        np.testing.assert_array_equal(new[1].grad, caps[1].grad)

    def test_save_captures(self, small_model, tmp_path):
        cs = sample_calibration(tokenize("x" * 50), 1, 8, seed=0)
        caps = capture_all(small_model, cs)
        save_captures(tmp_path / "c.fang", caps)
        back = archive_read(tmp_path / "c.fang")
        np.testing.assert_array_equal(back["layers.1.grad"], caps[1].grad)
