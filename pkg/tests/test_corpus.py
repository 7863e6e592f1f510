import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langneuron.corpus import SynthSpec, detokenize, load_corpus, synth_language, tokenize
from langneuron.model import BOS, EOS


def test_tokenize_round_trip():
    ids = tokenize("héllo".encode())
    assert ids[0] == BOS and ids[-1] == EOS
    assert detokenize(ids) == "héllo".encode()
    assert tokenize(b"abcdef", max_len=4).tolist() == [BOS, 97, 98, 99]


def test_three_line_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_bytes(b"ab\ncd\nef\n")
    c = load_corpus(p, "xx", 3, 0, 16)
    assert [s.tolist() for s in c.sentences] == [[256, 97, 98, 257], [256, 99, 100, 257], [256, 101, 102, 257]]
    assert not c.shortfall


def test_exact_count_keeps_order(tmp_path):
    lines = [f"line {i}" for i in range(10)]
    p = tmp_path / "c.txt"
    p.write_text("\n".join(lines) + "\n")
    c = load_corpus(p, "xx", 10, 5, 32)
    assert [detokenize(s).decode() for s in c.sentences] == lines


def test_sampling_deterministic(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("\n".join(f"s{i}" for i in range(100)))
    a = load_corpus(p, "xx", 7, 3, 32)
    b = load_corpus(p, "xx", 7, 3, 32)
    assert len(a) == 7
    assert all(np.array_equal(x, y) for x, y in zip(a.sentences, b.sentences))
    kept = [int(detokenize(s)[1:]) for s in a.sentences]
    assert kept == sorted(kept)


def test_shortfall_and_blank_lines(tmp_path):
    p = tmp_path / "c.txt"
    p.write_bytes(b"one\n\n\r\ntwo\r\n")
    c = load_corpus(p, "xx", 5, 0, 16)
    assert c.shortfall and [detokenize(s) for s in c.sentences] == [b"one", b"two"]


def test_bad_files(tmp_path):
    with pytest.raises(ValueError):
        load_corpus(tmp_path / "missing.txt", "xx", 3, 0, 16)
    p = tmp_path / "bin.txt"
    p.write_bytes(b"\xff\xfe\n")
    with pytest.raises(ValueError):
        load_corpus(p, "xx", 3, 0, 16)


def test_single_symbol_alphabet():
    c = synth_language(SynthSpec(b"a", 3, 9, seed=4), 20)
    for s in c.sentences:
        assert set(s[1:-1].tolist()) == {97}


def test_disjoint_alphabets_share_nothing():
    a = synth_language(SynthSpec(b"abcd", 2, 10, seed=1, zipf=1.0, markov=0.5), 50)
    b = synth_language(SynthSpec(b"wxyz", 2, 10, seed=2, zipf=1.0, markov=0.5), 50)
    bytes_a = {t for s in a.sentences for t in s.tolist() if t < 256}
    bytes_b = {t for s in b.sentences for t in s.tolist() if t < 256}
    assert not bytes_a & bytes_b


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8), st.integers(0, 8))
def test_synth_deterministic_and_in_range(seed, lo, extra):
    spec = SynthSpec(b"xyz", lo, lo + extra, seed=seed, markov=0.3)
    a = synth_language(spec, 5)
    b = synth_language(spec, 5)
    for x, y in zip(a.sentences, b.sentences):
        assert np.array_equal(x, y)
        assert lo <= len(x) - 2 <= lo + extra


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(b"")
    with pytest.raises(ValueError):
        SynthSpec(b"a", 5, 2)
