import pytest
from hypothesis import given, strategies as st

from sympac.vocab import (
    BAR_ID,
    CHORDS,
    GENRES,
    SECTIONS,
    TRACKS,
    VOCAB_SIZE,
    Token,
    build_vocab,
    chord_root,
    chord_root_index,
    kind_of_id,
    normalize_chord_symbol,
)


def test_total_size_is_sum_of_option_counts():
    # 1 bar + 1 eop + 1 eos + 7 sec + 8 bpm + 17 genre + 16 pos + 73 chord
    # + 5 track + 128 pitch + 32 duration + 47 drum
    assert 1 + 1 + 1 + 7 + 8 + 17 + 16 + 73 + 5 + 128 + 32 + 47 == 336
    assert build_vocab().total_size == 336


def test_bar_is_id_zero():
    assert build_vocab().id_of(Token("bar")) == BAR_ID == 0


def test_option_counts():
    assert len(SECTIONS) == 7
    assert len(GENRES) == 17
    assert len(CHORDS) == 73
    assert len(TRACKS) == 5


@given(st.integers(min_value=0, max_value=VOCAB_SIZE - 1))
def test_bijection(token_id):
    vocab = build_vocab()
    token = vocab.token_of(token_id)
    assert vocab.id_of(token) == token_id
    assert vocab.id_of_name(vocab.render(token_id)) == token_id
    assert kind_of_id(token_id) == token.kind


def test_chord_token_round_trip():
    vocab = build_vocab()
    token = Token("chord", "C:maj")
    assert vocab.token_of(vocab.id_of(token)) == token


def test_renderings():
    vocab = build_vocab()
    assert vocab.render(vocab.id_of(Token("position", 3))) == "position<3/16>"
    assert vocab.render(vocab.id_of(Token("duration", 4))) == "duration<4/16>"
    assert vocab.render(vocab.id_of(Token("bpm_level", "[120,125)"))) == "bpm_level<[120,125)>"


def test_ids_out_of_range():
    vocab = build_vocab()
    with pytest.raises(ValueError):
        vocab.token_of(336)
    with pytest.raises(ValueError):
        vocab.id_of(Token("chord", "H:maj"))


def test_chord_roots():
    assert chord_root("A#:min") == "A#"
    assert chord_root("N") == "N"
    assert chord_root_index("D:sus2") == 2


@pytest.mark.parametrize(
    "raw,expected",
    [("F", "F:maj"), ("A:min", "A:min"), ("A#", "A#:maj"), ("n", "N"), ("G#:dim", "G#:dim")],
)
def test_normalize_chord_symbol(raw, expected):
    assert normalize_chord_symbol(raw) == expected


def test_normalize_rejects_garbage():
    with pytest.raises(ValueError):
        normalize_chord_symbol("H:maj")
