import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from k12bert.corpus import SentenceRecord
from k12bert.mlm_dataset import (
    IGNORE_LABEL,
    MaskingPolicy,
    MlmExample,
    ShardCorruptionError,
    build_examples,
    example_rng,
    mask_tokens,
    pack_lengths,
    pack_segments,
    read_header,
    read_shards,
    shard_name,
    write_shards,
)


def records_for(doc_id, sentences, source="openstax"):
    return [SentenceRecord(s, doc_id, source, frozenset({"P"}), i, 5, 0) for i, s in enumerate(sentences)]


# -- packing -----------------------------------------------------------------

def test_pack_greedy_sum():
    assert pack_lengths([5, 6, 7], 20) == [18]


def test_pack_long_sentence_split():
    assert pack_lengths([300], 126) == [126, 126, 48]


def test_pack_flushes_when_next_does_not_fit():
    assert pack_lengths([10, 8, 5, 9], 20) == [18, 14]


@given(st.lists(st.integers(0, 60), max_size=20), st.integers(1, 40))
def test_pack_lengths_conserves_pieces(lengths, budget):
    out = pack_lengths(lengths, budget)
    assert sum(out) == sum(lengths)
    assert all(0 < n <= budget for n in out)


def test_pack_segments_never_mixes_documents(tokenizer):
    recs = records_for("a", ["the run", "the cell"]) + records_for("b", ["the atom"])
    segs = pack_segments(recs, tokenizer, max_len=64)
    assert [s.doc_id for s in segs] == ["a", "b"]
    assert segs[0].pieces == tuple(tokenizer.tokenize("the run") + tokenizer.tokenize("the cell"))


def test_pack_segments_no_pack(tokenizer):
    recs = records_for("a", ["the run", "the cell"])
    assert len(pack_segments(recs, tokenizer, 64, pack=False)) == 2


def test_pack_segments_matches_length_oracle(tokenizer, template_sentences):
    recs = records_for("d", template_sentences)
    segs = pack_segments(recs, tokenizer, max_len=32)
    lengths = [len(tokenizer.tokenize(s)) for s in template_sentences]
    assert [len(s.pieces) for s in segs] == pack_lengths(lengths, 30)
    flat = [p for s in segs for p in s.pieces]
    assert flat == [p for s in template_sentences for p in tokenizer.tokenize(s)]


# -- masking -----------------------------------------------------------------

def _seq(tokenizer, vocab, n_pieces, max_len, rng):
    words = [t for t in vocab.tokens if not t.startswith("[")]
    pieces = [words[i] for i in rng.integers(0, len(words), n_pieces)]
    return tokenizer.encode_pieces(pieces, max_len)


def test_policy_validation():
    with pytest.raises(ValueError):
        MaskingPolicy(mask_frac=0.7)
    with pytest.raises(ValueError):
        MaskingPolicy(select_prob=1.5)


def test_zero_select_prob(tokenizer, vocab):
    seq = tokenizer.encode("the cell is the unit of life", 16)
    ex = mask_tokens(seq, vocab, MaskingPolicy(select_prob=0.0), example_rng(0, 0, 0))
    assert ex.input_ids.tolist() == seq.input_ids
    assert (ex.labels == IGNORE_LABEL).all()


def test_saturated_masking(tokenizer, vocab):
    seq = tokenizer.encode("the cell is the unit of life", 16)
    ex = mask_tokens(seq, vocab, MaskingPolicy(select_prob=1.0, mask_frac=1.0, random_frac=0.0, keep_frac=0.0),
                     example_rng(0, 0, 0))
    maskable = [m == 1 and i not in vocab.special_ids for i, m in zip(seq.input_ids, seq.attention_mask)]
    for pos, ok in enumerate(maskable):
        if ok:
            assert ex.input_ids[pos] == vocab.mask_id and ex.labels[pos] == seq.input_ids[pos]
        else:
            assert ex.input_ids[pos] == seq.input_ids[pos] and ex.labels[pos] == IGNORE_LABEL


def masking_counts(tokenizer, vocab, policy, n_seqs=1000, max_len=128):
    rng = np.random.default_rng(123)
    counts = dict(maskable=0, selected=0, mask=0, random=0, keep=0)
    for i in range(n_seqs):
        seq = _seq(tokenizer, vocab, int(rng.integers(100, 200)), max_len, rng)
        ex = mask_tokens(seq, vocab, policy, example_rng(policy.seed, 0, i))
        for orig, m, new, lab in zip(seq.input_ids, seq.attention_mask, ex.input_ids.tolist(), ex.labels.tolist()):
            if m == 1 and orig not in vocab.special_ids:
                counts["maskable"] += 1
            if lab == IGNORE_LABEL:
                continue
            counts["selected"] += 1
            if new == vocab.mask_id:
                counts["mask"] += 1
            elif new == lab:
                counts["keep"] += 1
            else:
                counts["random"] += 1
    return counts


def test_masking_rates_monte_carlo(tokenizer, vocab):
    c = masking_counts(tokenizer, vocab, MaskingPolicy())
    assert c["maskable"] >= 100_000
    assert abs(c["selected"] / c["maskable"] - 0.15) <= 0.01
    assert abs(c["mask"] / c["selected"] - 0.80) <= 0.02
    assert abs(c["random"] / c["selected"] - 0.10) <= 0.02
    assert abs(c["keep"] / c["selected"] - 0.10) <= 0.02


def test_example_invariants_and_replay(tokenizer, vocab):
    rng = np.random.default_rng(5)
    policy = MaskingPolicy(select_prob=0.5, seed=9)
    for i in range(50):
        seq = _seq(tokenizer, vocab, int(rng.integers(0, 40)), 32, rng)
        ex = mask_tokens(seq, vocab, policy, example_rng(9, 1, i))
        ids = np.array(seq.input_ids)
        maskable = (np.array(seq.attention_mask) == 1) & ~np.isin(ids, sorted(vocab.special_ids))
        assert (maskable | (ex.labels == IGNORE_LABEL)).all()
        keep = ex.labels == IGNORE_LABEL
        assert (ex.input_ids[keep] == ids[keep]).all()
        assert (ex.labels[~keep] == ids[~keep]).all()
        # specials are never replaced and random ids are never special
        assert not np.isin(ex.input_ids[~keep & (ex.input_ids != vocab.mask_id)],
                           [vocab.pad_id, vocab.cls_id, vocab.sep_id, vocab.unk_id]).any()
        assert mask_tokens(seq, vocab, policy, example_rng(9, 1, i)) == ex


# -- shards ------------------------------------------------------------------

def small_examples(tokenizer, n=10, max_len=16, seed=0):
    sentences = [f"the cell {'is ' * (i % 3)}the unit of life" for i in range(n)]
    recs = [r for i, s in enumerate(sentences) for r in records_for(f"d{i:02d}", [s])]
    return build_examples(recs, tokenizer, max_len, MaskingPolicy(seed=seed, select_prob=0.3), shard_size=4)


def test_shard_sizes_and_round_trip(tokenizer, vocab, tmp_path):
    exs = small_examples(tokenizer)
    assert len(exs) == 10
    write_shards(exs, tmp_path, 4, max_len=16, vocab_size=len(vocab), policy=MaskingPolicy(seed=0, select_prob=0.3))
    header = read_header(tmp_path)
    assert header["shard_count"] == 3 and header["example_count"] == 10
    assert header["max_len"] == 16 and header["vocab_size"] == len(vocab)
    sizes = []
    for i in range(3):
        data = (tmp_path / shard_name(i)).read_bytes()
        assert data[:4] == b"MLM1"
        L, V, count = np.frombuffer(data[4:16], dtype="<u4")
        assert (L, V) == (16, len(vocab))
        assert len(data) == 16 + count * 16 * 9
        sizes.append(int(count))
    assert sizes == [4, 4, 2]
    back = read_shards(tmp_path)
    assert back == exs
    assert [e.doc_id for e in back] == [e.doc_id for e in exs]


def test_shard_layout_decoded_by_hand(tokenizer, vocab, tmp_path):
    exs = small_examples(tokenizer, n=1)
    write_shards(exs, tmp_path, 4, max_len=16, vocab_size=len(vocab), policy=MaskingPolicy())
    data = (tmp_path / shard_name(0)).read_bytes()
    ids = np.frombuffer(data, "<u4", 16, 16)
    mask = np.frombuffer(data, "u1", 16, 16 + 64)
    labels = np.frombuffer(data, "<i4", 16, 16 + 80)
    assert ids.tolist() == exs[0].input_ids.tolist()
    assert mask.tolist() == exs[0].attention_mask.tolist()
    assert labels.tolist() == exs[0].labels.tolist()


def test_deterministic_bytes(tokenizer, vocab, tmp_path):
    blobs = []
    for run in range(2):
        d = tmp_path / f"r{run}"
        write_shards(small_examples(tokenizer, seed=4), d, 4, max_len=16, vocab_size=len(vocab),
                     policy=MaskingPolicy(seed=4, select_prob=0.3))
        blobs.append([(d / shard_name(i)).read_bytes() for i in range(3)] + [(d / "dataset.json").read_bytes()])
    assert blobs[0] == blobs[1]
    other = small_examples(tokenizer, seed=5)
    assert other != small_examples(tokenizer, seed=4)


def test_rewrite_removes_stale_shards(tokenizer, vocab, tmp_path):
    exs = small_examples(tokenizer)
    write_shards(exs, tmp_path, 2, max_len=16, vocab_size=len(vocab), policy=MaskingPolicy())
    write_shards(exs, tmp_path, 5, max_len=16, vocab_size=len(vocab), policy=MaskingPolicy())
    assert sorted(p.name for p in tmp_path.glob("shard_*.bin")) == [shard_name(0), shard_name(1)]
    assert read_shards(tmp_path) == exs


@pytest.mark.parametrize("corrupt", ["magic", "count", "truncate", "header"])
def test_corruption_detected(tokenizer, vocab, tmp_path, corrupt):
    write_shards(small_examples(tokenizer), tmp_path, 4, max_len=16, vocab_size=len(vocab), policy=MaskingPolicy())
    shard = tmp_path / shard_name(1)
    data = bytearray(shard.read_bytes())
    if corrupt == "magic":
        data[:4] = b"XXXX"
    elif corrupt == "count":
        data[12:16] = (5).to_bytes(4, "little")
    elif corrupt == "truncate":
        data = data[:-3]
    shard.write_bytes(bytes(data))
    if corrupt == "header":
        h = json.loads((tmp_path / "dataset.json").read_text())
        h["example_count"] = 11
        (tmp_path / "dataset.json").write_text(json.dumps(h))
    with pytest.raises(ShardCorruptionError):
        read_shards(tmp_path)


def test_missing_shard_detected(tokenizer, vocab, tmp_path):
    write_shards(small_examples(tokenizer), tmp_path, 4, max_len=16, vocab_size=len(vocab), policy=MaskingPolicy())
    (tmp_path / shard_name(2)).unlink()
    with pytest.raises(ShardCorruptionError):
        read_shards(tmp_path)


def test_build_examples_provenance_isolation(tokenizer, dictionary, fixtures_dir):
    from k12bert.corpus import ingest, load_documents

    res = ingest(load_documents(fixtures_dir / "corpus"), dictionary)
    exs = build_examples(res.records, tokenizer, 64, MaskingPolicy(), shard_size=50)
    by_doc = {}
    for r in res.records:
        by_doc.setdefault(r.doc_id, []).extend(tokenizer.tokenize(r.text))
    rebuilt = {}
    for ex in exs:
        n = int(ex.attention_mask.sum())
        ids = np.where(ex.labels != IGNORE_LABEL, ex.labels, ex.input_ids)[1:n - 1]
        rebuilt.setdefault(ex.doc_id, []).extend(vocab_tokens(tokenizer, ids))
    # each document's pieces are recovered from its own examples only
    assert rebuilt == by_doc


def vocab_tokens(tokenizer, ids):
    return [tokenizer.vocab.tokens[i] for i in ids]


def test_mlm_example_equality():
    a = MlmExample(np.array([1, 2]), np.array([1, 1], dtype=np.uint8), np.array([-1, 2]))
    b = MlmExample(np.array([1, 2]), np.array([1, 1], dtype=np.uint8), np.array([-1, 2]), doc_id="x")
    assert a == b
    assert a != MlmExample(np.array([1, 3]), a.attention_mask, a.labels)
