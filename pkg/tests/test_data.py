from collections import Counter

import pytest

from legofl.data import (
    DOMAIN_NAMES,
    VOCAB,
    build_corpus,
    collate,
    decode,
    default_task_weights,
    encode,
    iter_batches,
    partition_by_task,
    partition_iid,
)
from legofl.errors import InputError, PartitionError
from legofl.mathcore import Rng


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(Rng(0, ("data",)), DOMAIN_NAMES, 30, 100, 10)


def test_vocab_and_codec():
    assert len(VOCAB) == 64 and len(set(VOCAB)) == 64
    assert decode(encode("C12+3=15")) == "C12+3=15"
    with pytest.raises(InputError):
        encode("~")


def test_eight_domains_with_disjoint_splits(corpus):
    assert len(DOMAIN_NAMES) == 8
    texts = [set(e.text for e in getattr(corpus, s)) for s in ("pretrain", "finetune", "heldout")]
    assert not (texts[0] & texts[1]) and not (texts[0] & texts[2]) and not (texts[1] & texts[2])
    assert Counter(e.domain for e in corpus.finetune) == {d: 100 for d in DOMAIN_NAMES}


def test_corpus_is_seeded(corpus):
    again = build_corpus(Rng(0, ("data",)), DOMAIN_NAMES, 30, 100, 10)
    assert [e.text for e in again.heldout] == [e.text for e in corpus.heldout]


def test_collate_weights_answer_tokens_only(corpus):
    ex = corpus.finetune[0]
    b = collate([ex])
    n_answer = len(ex.seq) - ex.answer_start
    assert b.weights.sum() == n_answer
    assert b.targets[0, ex.answer_start - 1] == ex.seq[ex.answer_start]
    full = collate([ex], answer_only=False)
    assert full.weights.sum() == len(ex.seq) - 1


def test_iter_batches_covers_everything(corpus):
    sizes = [b.inputs.shape[0] for b in iter_batches(corpus.heldout, 7, Rng(1))]
    assert sum(sizes) == len(corpus.heldout)


def test_iid_four_clients(corpus):
    shards = partition_iid(corpus.finetune, 4, Rng(1))
    assert [len(s) for s in shards] == [200] * 4
    for s in shards:
        assert Counter(e.domain for e in s) == {d: 25 for d in DOMAIN_NAMES}
    ids = [id(e) for s in shards for e in s]
    assert len(ids) == len(set(ids)) == len(corpus.finetune)


def test_iid_single_client_is_corpus(corpus):
    (only,) = partition_iid(corpus.finetune, 1, Rng(1))
    assert sorted(e.text for e in only) == sorted(e.text for e in corpus.finetune)


@pytest.mark.parametrize("n", [3, 7])
def test_iid_balanced_within_one(corpus, n):
    shards = partition_iid(corpus.finetune, n, Rng(2))
    sizes = [len(s) for s in shards]
    assert max(sizes) - min(sizes) <= 1
    for d in DOMAIN_NAMES:
        counts = [sum(e.domain == d for e in s) for s in shards]
        assert max(counts) - min(counts) <= 1


def test_iid_too_many_clients(corpus):
    with pytest.raises(PartitionError):
        partition_iid(corpus.heldout, 11, Rng(0))


def test_task_partition_default(corpus):
    shards = partition_by_task(corpus.finetune)
    assert len(shards) == 8
    assert all(len({e.domain for e in s}) == 1 for s in shards)
    assert [s[0].domain for s in shards] == list(DOMAIN_NAMES)
    assert len(shards[0]) / len(shards[-1]) == pytest.approx(5.0)
    assert default_task_weights(8)[0] / default_task_weights(8)[-1] == pytest.approx(5.0)


def test_task_partition_five_to_one():
    big = build_corpus(Rng(3), DOMAIN_NAMES[:2], 1, 500, 1)
    shards = partition_by_task(big.finetune, DOMAIN_NAMES[:2], [1.0, 0.2])
    assert [len(s) for s in shards] == [500, 100]


def test_task_partition_empty_domain(corpus):
    with pytest.raises(PartitionError):
        partition_by_task([e for e in corpus.finetune if e.domain != "copy"])


def test_generators_produce_valid_answers(corpus):
    for e in corpus.heldout:
        assert e.seq[-1] == 2 and e.seq[0] == 1
        assert all(0 <= t < 64 for t in e.seq)
    arith = [e for e in corpus.heldout if e.domain == "arithmetic"]
    for e in arith:
        prompt, answer = e.text[1:].split("=")
        assert str(eval(prompt)) == answer  # noqa: S307
    rev = [e for e in corpus.heldout if e.domain == "reverse"]
    for e in rev:
        prompt, answer = e.text[1:].split("=")
        assert answer == prompt[::-1]
