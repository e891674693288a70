import json

import pytest

import lslm


def test_codebook_round_trip():
    cb = lslm.Codebook.build(3)
    tokens = cb.synth("duplex")
    assert len(tokens) == 18
    assert cb.invert(tokens) == ("duplex", 0)
    with pytest.raises(lslm.InputError):
        cb.synth("Duplex")


def test_metrics():
    assert lslm.edit_distance([1, 2, 3], [1, 9, 3]) == 1
    assert lslm.token_error_rate([1, 9, 3], [1, 2, 3]) == pytest.approx(1 / 3)
    assert lslm.classify(True, 10, "irq", 14, 8) == "TP"
    assert lslm.classify(True, 10, "irq", 19, 8) == "FN"
    assert lslm.classify(False, None, "irq", 3, 8) == "FP"
    assert lslm.classify(False, None, None, 0, 8) == "TN"
    assert lslm.aggregate(8, 2, 2, 8) == pytest.approx((0.8, 0.8, 0.8))


def test_corpus(tmp_path):
    counts = lslm.write_corpus(tmp_path, seed=4, n_train=50, n_val=10, n_test_interrupted=5,
                               n_test_clean=5, n_tts_test=5)
    assert counts == {"train": 50, "val": 10, "test": 10, "tts_test": 5}
    first = json.loads((tmp_path / "train.jsonl").read_text().splitlines()[0])
    assert set(first) >= {"context", "speak_target", "listen"}
    with pytest.raises(lslm.ConfigError):
        lslm.write_corpus(tmp_path, noise_prob=2.0)


def test_generation_is_deterministic(tmp_path):
    model = lslm.model_from_config(n_blocks=1, d_model=16, n_heads=2, d_ff=32, max_seq_len=64)
    assert model.listening
    a = lslm.generate(model, "hello", [0] * 31, seed=5)
    b = lslm.generate(model, "hello", [0] * 31, seed=5)
    assert a == b
    assert a["stop"]["step"] == len(a["tokens"])
    path = tmp_path / "m.ckpt"
    model.save(path)
    assert lslm.generate(lslm.Model.load(path), "hello", [0] * 31, seed=5) == a
