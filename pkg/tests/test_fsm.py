import numpy as np
import pytest

from sympac.encoding import decode_sequence, encode_song, validate
from sympac.errors import ConstraintConflictError, ControlError
from sympac.fsm import (
    ControlSpec,
    build_rules,
    compile_control,
    get_sub_vocab,
    initial_state,
    mask_for_state,
    parse_chords_arg,
    parse_structure_arg,
    replay,
    update_state,
)
from sympac.vocab import (
    BAR_ID,
    EOS_ID,
    GENRE_BASE,
    GENRES,
    build_vocab,
    genre_id,
    track_id,
)
from synthcorpus import random_grid_song

RULES = build_rules()
VOCAB = build_vocab()


def uniform_walk(rng, control=None, max_tokens=4000):
    state = initial_state(control)
    cc = compile_control(control)
    seq = [BAR_ID]
    while not state.terminal and len(seq) < max_tokens:
        mask = get_sub_vocab(RULES, state, seq[-1], cc)
        ids = np.flatnonzero(mask)
        token = int(ids[rng.integers(len(ids))])
        seq.append(token)
        state = update_state(RULES, state, token)
    return seq, state.terminal


def test_initial_state_expects_genre():
    state = initial_state(ControlSpec())
    mask = mask_for_state(RULES, state)
    ids = np.flatnonzero(mask)
    assert len(ids) == 17
    assert all(VOCAB.token_of(int(i)).kind == "genre" for i in ids)


def test_fixed_genre_gives_singleton_first_mask():
    state = initial_state(ControlSpec(genre="Rock"))
    mask = get_sub_vocab(RULES, state, BAR_ID, ControlSpec(genre="Rock"))
    assert np.flatnonzero(mask).tolist() == [genre_id("Rock")]


def test_control_validation():
    with pytest.raises(ControlError):
        ControlSpec(sections=("intro",) * 3, n_bars=4)
    with pytest.raises(ControlError):
        ControlSpec(allowed_tracks=frozenset({"piano"}), forced_tracks=frozenset({"vocal"}))
    with pytest.raises(ControlError):
        ControlSpec(genre="Polka")
    with pytest.raises(ControlError):
        ControlSpec(n_bars=0)
    with pytest.raises(ControlError):
        ControlSpec(chord_schedule=((0, 4, "C"), (0, 4, "G")))  # duplicate slot


def test_header_transitions():
    state = initial_state(ControlSpec())
    state = update_state(RULES, state, genre_id("Pop"))
    assert state.phase_name == "ExpectBarHeader(sec)"
    state = update_state(RULES, state, VOCAB.id_of_name("sec<verse>"))
    assert state.phase_name == "ExpectBarHeader(bpm_level)"
    state = update_state(RULES, state, VOCAB.id_of_name("bpm_level<[120,125)>"))
    assert state.phase_name == "ChordPosOrNext"


def test_note_group_transitions():
    # duration slot leads to the pitch slot
    rng = np.random.default_rng(0)
    seq, _ = uniform_walk(rng)
    state = initial_state(None)
    for prev, token in zip(seq, seq[1:]):
        before = state.phase_name
        state = update_state(RULES, state, token)
        if before == "NoteDur":
            assert state.phase_name == "NotePitch"
    assert state.terminal


def test_terminal_on_end_of_song():
    rng = np.random.default_rng(1)
    seq, done = uniform_walk(rng)
    assert done and seq[-1] == EOS_ID


def test_illegal_transition_raises():
    state = initial_state(None)
    with pytest.raises(ValueError, match="illegal transition"):
        update_state(RULES, state, VOCAB.id_of_name("pitch<60>"))


def test_soundness_under_uniform_fuzz():
    rng = np.random.default_rng(123)
    for _ in range(400):
        seq, done = uniform_walk(rng)
        if done:
            assert validate(seq) == []


def test_completeness_on_encoded_songs():
    rng = np.random.default_rng(17)
    for _ in range(150):
        song = random_grid_song(rng)
        end = replay(RULES, encode_song(song), check_masks=True)
        assert end.terminal


def test_grammar_masks_never_empty_along_walks():
    rng = np.random.default_rng(19)
    for _ in range(60):
        state = initial_state(None)
        seq = [BAR_ID]
        while not state.terminal and len(seq) < 600:
            mask = mask_for_state(RULES, state, None)
            ids = np.flatnonzero(mask)
            assert len(ids) >= 1
            token = int(ids[rng.integers(len(ids))])
            seq.append(token)
            state = update_state(RULES, state, token)


def test_sections_control_fixes_sections():
    rng = np.random.default_rng(29)
    control = ControlSpec(sections=("intro", "intro", "verse", "chorus"))
    for _ in range(15):
        seq, done = uniform_walk(rng, control)
        assert done
        song = decode_sequence(seq)
        assert [b.section for b in song.bars] == ["intro", "intro", "verse", "chorus"]


def test_chord_loop_control():
    rng = np.random.default_rng(31)
    control = ControlSpec(chords=("F", "C", "G", "A:min"), n_bars=6)
    for _ in range(15):
        seq, done = uniform_walk(rng, control)
        assert done
        song = decode_sequence(seq)
        assert len(song.bars) == 6
        expected = ["F:maj", "C:maj", "G:maj", "A:min", "F:maj", "C:maj"]
        assert [b.chords for b in song.bars] == [[(0, sym)] for sym in expected]


def test_chord_schedule_control():
    rng = np.random.default_rng(37)
    control = ControlSpec(
        chord_schedule=((0, 0, "C"), (0, 8, "G"), (1, 4, "A:min")), n_bars=2
    )
    seq, done = uniform_walk(rng, control)
    assert done
    song = decode_sequence(seq)
    assert song.bars[0].chords == [(0, "C:maj"), (8, "G:maj")]
    assert song.bars[1].chords == [(4, "A:min")]


def test_allowed_tracks_control():
    rng = np.random.default_rng(41)
    control = ControlSpec(allowed_tracks=frozenset({"piano"}), n_bars=3)
    for _ in range(15):
        seq, done = uniform_walk(rng, control)
        assert done
        song = decode_sequence(seq)
        for bar in song.bars:
            assert set(bar.tracks) <= {"piano"}
            assert not bar.drums


def test_forced_tracks_appear_in_every_bar():
    rng = np.random.default_rng(43)
    control = ControlSpec(forced_tracks=frozenset({"bass", "drums"}), n_bars=4)
    for _ in range(15):
        seq, done = uniform_walk(rng, control, max_tokens=8000)
        assert done
        song = decode_sequence(seq)
        for bar in song.bars:
            assert "bass" in bar.tracks
            assert bar.drums


def test_n_bars_control_fixes_length():
    rng = np.random.default_rng(47)
    for n in (1, 2, 7):
        seq, done = uniform_walk(rng, ControlSpec(n_bars=n))
        assert done
        assert len(decode_sequence(seq).bars) == n


def test_bpm_control():
    rng = np.random.default_rng(53)
    seq, done = uniform_walk(rng, ControlSpec(bpm_level=6, n_bars=3))
    assert done
    assert all(b.bpm_level == 6 for b in decode_sequence(seq).bars)


def test_full_control_pins_whole_prompt():
    # every header and chord token is forced; only note content is free
    control = ControlSpec(
        genre="Rock",
        bpm_level=2,
        sections=("verse", "verse"),
        chords=("C",),
        allowed_tracks=frozenset({"piano"}),
        forced_tracks=frozenset({"piano"}),
    )
    state = initial_state(control)
    cc = compile_control(control)
    forced_prefix = []
    seq = [BAR_ID]
    while True:
        mask = get_sub_vocab(RULES, state, seq[-1], cc)
        ids = np.flatnonzero(mask)
        if len(ids) > 1:
            break
        token = int(ids[0])
        forced_prefix.append(VOCAB.render(token))
        seq.append(token)
        state = update_state(RULES, state, token)
    bar0 = ["genre<Rock>", "sec<verse>", "bpm_level<[96,110)>",
            "position<0/16>", "chord<C:maj>", "track<piano>"]
    # both prompt bars, the separator, and the first song bar up to its
    # track token are all forced; freedom first appears at note positions
    assert forced_prefix == bar0 + ["bar"] + bar0 + ["end_of_prompt", "bar"] + bar0
    assert len(ids) == 16
    assert all(VOCAB.token_of(int(i)).kind == "position" for i in ids)


def test_constraint_conflict_reported():
    # a state claiming a forced track was skipped can never satisfy it
    control = ControlSpec(forced_tracks=frozenset({"vocal"}))
    state = initial_state(control)
    state = update_state(RULES, state, genre_id("Pop"))
    state = update_state(RULES, state, VOCAB.id_of_name("sec<verse>"))
    state = update_state(RULES, state, VOCAB.id_of_name("bpm_level<<82>"))
    state = update_state(RULES, state, track_id("piano"))  # grammar allows; control later conflicts
    state.tracks_emitted = 0b11110  # pretend vocal was skipped (unreachable via masks)
    state.cur_chords = ()
    with pytest.raises(ConstraintConflictError, match="no legal token"):
        mask_for_state(RULES, state, control)


def test_update_state_returns_fresh_value():
    state = initial_state(None)
    after = update_state(RULES, state, genre_id("Pop"))
    assert state.phase_name == "ExpectBarHeader(genre)"
    assert after is not state


def test_parse_chords_arg():
    assert parse_chords_arg("F, D:min, C, G") == ("F:maj", "D:min", "C:maj", "G:maj")
    with pytest.raises(ControlError):
        parse_chords_arg("  ")


def test_parse_structure_arg():
    assert parse_structure_arg("intro*2,verse*3") == (
        "intro", "intro", "verse", "verse", "verse",
    )
    with pytest.raises(ControlError):
        parse_structure_arg("nave*4")


def test_control_json_round_trip():
    spec = ControlSpec(
        genre="Pop",
        sections=("intro", "intro", "verse"),
        chords=("C", "G"),
        allowed_tracks=frozenset({"piano", "drums"}),
        n_bars=3,
    )
    again = ControlSpec.from_json(spec.to_json())
    assert again == spec


def test_genre_locks_after_first_bar():
    rng = np.random.default_rng(59)
    for _ in range(20):
        seq, done = uniform_walk(rng, ControlSpec(n_bars=3))
        assert done
        genres = {t for t in seq if GENRE_BASE <= t < GENRE_BASE + len(GENRES)}
        assert len(genres) == 1


def test_note_cap_closes_part():
    # 128 note groups in one song-bar track part exhaust the mask's positions
    from sympac.vocab import EOP_ID, duration_id, pitch_id, position_id

    header = (genre_id("Pop"), VOCAB.id_of_name("sec<verse>"), VOCAB.id_of_name("bpm_level<<82>"))
    state = initial_state(None)
    for token in header + (track_id("piano"), EOP_ID, BAR_ID) + header + (track_id("piano"),):
        state = update_state(RULES, state, token)
    assert state.phase_name == "NotePos"
    for i in range(128):
        state = update_state(RULES, state, position_id(15))
        state = update_state(RULES, state, duration_id(1))
        state = update_state(RULES, state, pitch_id(i))
    mask = mask_for_state(RULES, state, None)
    kinds = {VOCAB.token_of(int(t)).kind for t in np.flatnonzero(mask)}
    assert "position" not in kinds
    assert kinds <= {"track", "bar", "end_of_song"}


def test_chord_schedule_beyond_requested_bars_rejected():
    with pytest.raises(ControlError, match="bar 5"):
        ControlSpec(chord_schedule=((5, 0, "C"),), n_bars=4)
    with pytest.raises(ControlError, match="bar 3"):
        ControlSpec(chord_schedule=((3, 0, "C"),), sections=("verse",) * 2)
