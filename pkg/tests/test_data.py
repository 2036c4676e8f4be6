import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridssm.data import (EOD, ByteTokenizer, CorpusSource, DataSourceCursor, MixtureSpec, build_synthetic_corpus,
                            initial_cursors, load_corpus, next_batch, pack_documents, pretokenize, read_tokens,
                            unpack_documents, write_source)


def test_pretokenize_examples():
    assert pretokenize("2023") == ["2", "0", "2", "3"]
    assert pretokenize("a,b") == ["a", ",", "b"]
    assert pretokenize("2023", False, False) == ["2023"]
    assert pretokenize("a,b", False, False) == ["a,b"]
    assert pretokenize("x  12!", True, True) == ["x", "  ", "1", "2", "!"]
    with pytest.raises(ValueError, match="UTF-8"):
        pretokenize(b"ok \xff")


@settings(max_examples=50, deadline=None)
@given(text=st.text(max_size=40), digits=st.booleans(), punct=st.booleans())
def test_pretokenize_is_lossless(text, digits, punct):
    assert "".join(pretokenize(text, digits, punct)) == text
    tok = ByteTokenizer(digits, punct)
    ids = tok.encode(text)
    assert ids[-1] == EOD and tok.decode(ids) == text


def test_pack_single_document():
    (b,) = pack_documents([list(range(1, 9))], 8, 1)
    assert b.resets[0].tolist() == [True] + [False] * 7
    assert b.positions[0].tolist() == list(range(8))
    b.check_invariants()


def test_pack_two_documents():
    (b,) = pack_documents([[1, 2, 3], [4, 5, 6, 7, 8]], 8, 1)
    assert np.flatnonzero(b.resets[0]).tolist() == [0, 3]
    assert b.doc_ids[0].tolist() == [0, 0, 0, 1, 1, 1, 1, 1]
    assert b.positions[0].tolist() == [0, 1, 2, 0, 1, 2, 3, 4]
    w = b.target_weights()[0]
    assert w.tolist() == [1, 1, 0, 1, 1, 1, 1]


def test_row_split_document_continues_positions():
    (b,) = pack_documents([[1, 2, 3, 4, 5, 6]], 4, 2)
    # each row starts with a reset so no state crosses rows; positions carry on
    assert b.resets[:, 0].all() and b.positions[1].tolist() == [4, 5, 0, 1]
    assert not b.valid[1, 2:].any()
    b.check_invariants()


@settings(max_examples=40, deadline=None)
@given(lengths=st.lists(st.integers(1, 30), min_size=1, max_size=12), T=st.integers(2, 16), batch=st.integers(1, 3))
def test_pack_round_trip(lengths, T, batch):
    rng = np.random.default_rng(sum(lengths))
    docs = [rng.integers(0, 256, n) for n in lengths]
    batches = pack_documents(docs, T, batch)
    for b in batches:
        b.check_invariants()
    back = unpack_documents(batches)
    assert len(back) == len(docs) and all(np.array_equal(a, d) for a, d in zip(back, docs))


def test_pack_errors():
    with pytest.raises(ValueError):
        pack_documents([], 8, 1)
    with pytest.raises(ValueError):
        pack_documents([[1], []], 8, 1)


def test_mixture_quotas():
    assert MixtureSpec((("a", 0.5), ("b", 0.5))).quotas(100) == [50, 50]
    assert MixtureSpec((("a", 0.5), ("b", 0.5))).quotas(101) == [51, 50]
    assert MixtureSpec((("a", 0.5), ("b", 0.3), ("c", 0.2))).quotas(7) == [4, 2, 1]
    assert sum(MixtureSpec.uniform(["a", "b", "c"]).quotas(100)) == 100
    with pytest.raises(ValueError):
        MixtureSpec((("a", 0.6), ("b", 0.3)))


def test_single_source_reads_in_file_order():
    docs = [[1, 2, 3], [4, 5], [6, 7, 8, 9]]
    src = {"s": CorpusSource.from_docs("s", docs)}
    mix = MixtureSpec((("s", 1.0),))
    b, cur = next_batch(src, initial_cursors(mix), mix, 1, 9)
    assert b.tokens[0].tolist() == list(range(1, 10))
    assert b.doc_ids[0].tolist() == [0, 0, 0, 1, 1, 2, 2, 2, 2]
    assert cur["s"].epochs_completed == 1 and cur["s"].doc_index == 0


def test_epoch_wrap_and_cursor_fields():
    src = CorpusSource.from_docs("s", [[1, 2], [3]])
    frags, cur = read_tokens(src, DataSourceCursor("s"), 5)
    assert [f.tokens.tolist() for f in frags] == [[1, 2], [3], [1, 2]]
    assert (cur.epochs_completed, cur.documents_consumed, cur.doc_index, cur.token_offset) == (1, 3, 1, 0)
    assert DataSourceCursor.from_dict(json.loads(json.dumps(cur.to_dict()))) == cur


def test_corpus_files_and_resume(tmp_path):
    build_synthetic_corpus(tmp_path, 6000, seed=2)
    src = load_corpus(tmp_path)
    assert sorted(src) == ["arith", "count", "text"]
    man = json.loads((tmp_path / "count.json").read_text())
    assert man["n_tokens"] == int(src["count"].tokens.size)
    mix = MixtureSpec((("arith", 0.5), ("count", 0.3), ("text", 0.2)))
    cur = initial_cursors(mix)
    full, saved = [], None
    for k in range(40):
        b, cur = next_batch(src, cur, mix, 2, 17)
        b.check_invariants()
        full.append(b.digest())
        if k == 19:
            saved = json.dumps({n: c.to_dict() for n, c in cur.items()})
    cur = {n: DataSourceCursor.from_dict(c) for n, c in json.loads(saved).items()}
    src = load_corpus(tmp_path)
    again = []
    for _ in range(20):
        b, cur = next_batch(src, cur, mix, 2, 17)
        again.append(b.digest())
    assert again == full[20:]
    off = cur["count"].byte_offset(src["count"])
    blob = (tmp_path / "count.bin").read_bytes()
    d = src["count"].doc(cur["count"].doc_index)
    assert int.from_bytes(blob[off:off + 4], "little") == d[cur["count"].token_offset]


def test_corrupt_source_is_rejected(tmp_path):
    write_source(tmp_path, "s", [[1, 2, 3]])
    raw = bytearray((tmp_path / "s.bin").read_bytes())
    raw[-1] ^= 1
    (tmp_path / "s.bin").write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        load_corpus(tmp_path)
    with pytest.raises(ValueError):
        write_source(tmp_path, "e", [[1], []])


def test_unknown_source_in_mixture():
    src = {"s": CorpusSource.from_docs("s", [[1, 2]])}
    mix = MixtureSpec((("t", 1.0),))
    with pytest.raises(KeyError):
        next_batch(src, initial_cursors(mix), mix, 1, 4)
