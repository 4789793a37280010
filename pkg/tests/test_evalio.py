import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from legofl.checkpoint import MAGIC, dumps, loads
from legofl.data import DOMAIN_NAMES, collate
from legofl.errors import CheckpointError, InputError, MissingInputError, SchemaError, UnsupportedVersionError
from legofl.evalio import (
    EvalSuite,
    MetricsRecord,
    evaluate,
    evaluate_all,
    load_checkpoint,
    metrics_header,
    read_metrics,
    save_checkpoint,
    write_metrics,
)
from legofl.mathcore import Rng
from legofl.model import Adam, ModelConfig, forward, init_adapter, new_model, train_step
from legofl.pruning import magnitude_prune

GOLDEN = Path(__file__).parent / "golden"


def golden_model():
    cfg = ModelConfig(vocab_size=64, d_model=4, n_heads=2, n_layers=1, max_seq_len=4, lora_rank=1, lora_alpha=2.0, d_ff=8)
    m = new_model(cfg, Rng(0, ("golden",)))
    for k in m.maskable_keys():
        m.masks[k] = magnitude_prune(m.params[k], 0.5)
    m.apply_masks()
    m.sparsity_level = 0.5
    m.adapter = init_adapter(cfg, m.layer_ids, Rng(1, ("golden",)))
    k = m.adapter.keys()[0]
    m.adapter.mask_A[k] = np.array([[True, False, True, True]])
    m.adapter.apply_masks()
    return m


def _suite(n_domains=2, seed=0):
    from legofl.data import build_corpus

    corpus = build_corpus(Rng(seed), DOMAIN_NAMES[:n_domains], 1, 1, 6)
    return EvalSuite.from_corpus(corpus)


# ------------------------------------------------------------------ checkpoints


def test_checkpoint_matches_golden_bytes():
    assert dumps(golden_model()) == (GOLDEN / "tiny.ckpt").read_bytes()


def test_golden_checkpoint_layout():
    buf = (GOLDEN / "tiny.ckpt").read_bytes()
    assert buf[:8] == MAGIC == b"LEGOCKPT"
    assert struct.unpack("<H", buf[8:10]) == (1,)


def test_round_trip_is_bit_exact(tmp_path, tiny_model, tokens):
    m = golden_model()
    path = save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    assert back.config == m.config and back.layer_ids == m.layer_ids and back.sparsity_level == 0.5
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k]) and back.params[k].dtype == np.float32
    for k in m.masks:
        assert np.array_equal(back.masks[k], m.masks[k])
    k = m.adapter.keys()[0]
    assert np.array_equal(back.adapter.mask_A[k], m.adapter.mask_A[k])
    assert back.adapter.mask_B[k] is None
    assert np.array_equal(forward(back, tokens[:, :4]), forward(m, tokens[:, :4]))
    assert dumps(back) == dumps(m)


def test_reload_reproduces_metrics(tmp_path, tiny_model):
    suite = _suite()
    train_step(tiny_model, _train_batch(), Adam(lr=0.05))
    before = evaluate(tiny_model, suite)
    back = load_checkpoint(save_checkpoint(tiny_model, tmp_path / "c.ckpt"))
    assert evaluate(back, suite).values == before.values


def _train_batch():
    from legofl.data import build_corpus

    return collate(build_corpus(Rng(9), DOMAIN_NAMES[:1], 4, 1, 1).pretrain)


@pytest.mark.parametrize("cut", [0, 5, 9, 40, -3])
def test_truncated_checkpoint_is_parse_error(cut):
    buf = dumps(golden_model())
    with pytest.raises(CheckpointError):
        loads(buf[:cut])


def test_checkpoint_errors(tmp_path):
    buf = bytearray(dumps(golden_model()))
    buf[8:10] = struct.pack("<H", 99)
    with pytest.raises(UnsupportedVersionError):
        loads(bytes(buf))
    with pytest.raises(CheckpointError):
        loads(b"NOTACKPT" + bytes(20))
    with pytest.raises(CheckpointError):
        loads(dumps(golden_model()) + b"\0")
    with pytest.raises(MissingInputError):
        load_checkpoint(tmp_path / "absent.ckpt")


# ------------------------------------------------------------------ evaluation


def test_uniform_logits_give_perplexity_vocab():
    m = new_model(ModelConfig(d_model=8, n_layers=1, d_ff=16), Rng(0))
    m.params["head"] = np.zeros_like(m.params["head"])
    suite = _suite()
    assert all(abs(v - 64.0) < 1e-3 for v in evaluate(m, suite, "perplexity").values.values())


def test_memorizer_reaches_full_accuracy():
    cfg = ModelConfig(d_model=16, n_layers=1, d_ff=32)
    m = new_model(cfg, Rng(0))
    batch = _train_batch()
    opt = Adam(lr=0.02)
    for _ in range(150):
        train_step(m, batch, opt, train_base=True)
    suite = EvalSuite({"copy": batch})
    assert evaluate(m, suite, "accuracy").values["copy"] == 1.0


def test_evaluation_is_pure_and_repeatable(tiny_model):
    suite = _suite()
    h = tiny_model.base_hash()
    a, b = evaluate_all(tiny_model, suite), evaluate_all(tiny_model, suite)
    assert a == b and tiny_model.base_hash() == h
    assert set(a) == {"loss", "perplexity", "accuracy"}
    with pytest.raises(InputError):
        evaluate(tiny_model, EvalSuite(suite.batches, vocab_size=32))
    with pytest.raises(InputError):
        evaluate(tiny_model, suite, "bleu")


# --------------------------------------------------------------------- metrics


def test_metrics_header_matches_golden():
    assert ",".join(metrics_header()) + "\n" == (GOLDEN / "metrics_header.csv").read_text()


def test_empty_records_write_header_only(tmp_path):
    path = write_metrics([], tmp_path / "m.csv")
    assert path.read_text() == (GOLDEN / "metrics_header.csv").read_text()
    assert read_metrics(path) == []


values = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@given(st.lists(st.tuples(st.integers(0, 50), st.sampled_from(["global", "0", "3"]), st.sampled_from(["pruned", "fine_tuned"]),
                          st.lists(values, min_size=8, max_size=8)), max_size=5))
def test_round_trip_and_average(tmp_path_factory, rows):
    recs = [MetricsRecord(k, s, st_, dict(zip(DOMAIN_NAMES, v))) for k, s, st_, v in rows]
    for r in recs:
        assert abs(r.average - float(np.mean(list(r.values.values())))) <= 1e-9
    path = tmp_path_factory.mktemp("m") / "m.csv"
    write_metrics(recs, path, DOMAIN_NAMES)
    assert read_metrics(path) == recs


def test_values_keep_nine_significant_digits():
    r = MetricsRecord(0, "global", "pruned", {"a": 1.23456789123, "b": 2.0})
    assert r.values["a"] == 1.23456789


def test_schema_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("round,who,stage,a,average\n")
    with pytest.raises(SchemaError):
        read_metrics(bad)
    wrong_avg = tmp_path / "avg.csv"
    wrong_avg.write_text("round,subject,stage,a,b,average\n0,global,pruned,1.0,3.0,2.5\n")
    with pytest.raises(SchemaError):
        read_metrics(wrong_avg)
    short = tmp_path / "short.csv"
    short.write_text("round,subject,stage,a,average\n0,global\n")
    with pytest.raises(SchemaError):
        read_metrics(short)
    with pytest.raises(OSError, match="absent"):
        read_metrics(tmp_path / "absent.csv")
