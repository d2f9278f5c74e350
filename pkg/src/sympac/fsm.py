"""Finite state machine for constrained decoding.

At every step the machine exposes the sub-vocabulary that is legal next,
as the intersection of two constraint classes: the encoding grammar
(bar-header order, chord/track/drum part structure, position
monotonicity) and the user's controls (genre, tempo bucket, per-bar
sections, a looped or scheduled chord progression, allowed and forced
tracks, bar count).

The machine generates prompt bars first and remembers them; during song
bars it pins the header and chord tokens of bar *i* to the prompt bar
*i* it generated earlier, and restricts track tokens to those the prompt
promised.  Tracks may still be skipped unless listed in
``forced_tracks``.  Because the song section replays the prompt
skeleton, any control satisfied by the prompt is satisfied by the music.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import ConstraintConflictError, ControlError
from .vocab import (
    BAR_ID,
    BPM_BASE,
    BPM_LABELS,
    CHORD_BASE,
    CHORDS,
    DRUM_BASE,
    DRUM_KEY_MIN,
    DUR_BASE,
    EOP_ID,
    EOS_ID,
    GENRE_BASE,
    GENRES,
    MAX_DURATION,
    N_PITCHES,
    N_STEPS,
    PITCH_BASE,
    POS_BASE,
    SEC_BASE,
    SECTIONS,
    TRACK_BASE,
    TRACKS,
    VOCAB_SIZE,
    Token,
    build_vocab,
    normalize_chord_symbol,
)

# Safety rail: a track part closes once it holds this many note groups.
MAX_NOTES_PER_PART = 128

_N_DRUMS = VOCAB_SIZE - DRUM_BASE
_DRUMS_TRACK = len(TRACKS) - 1
_ALL_TRACKS_MASK = (1 << len(TRACKS)) - 1

# Decoding phases.
(
    PH_BAR,
    PH_GENRE,
    PH_SEC,
    PH_BPM,
    PH_CHORD_POS,
    PH_CHORD_SYM,
    PH_TRACK_START,
    PH_NOTE_POS,
    PH_NOTE_DUR,
    PH_NOTE_PITCH,
    PH_DRUM_POS,
    PH_DRUM_KEY,
    PH_TERMINAL,
) = range(13)

PHASE_NAMES = (
    "ExpectBarHeader(bar)",
    "ExpectBarHeader(genre)",
    "ExpectBarHeader(sec)",
    "ExpectBarHeader(bpm_level)",
    "ChordPosOrNext",
    "ChordSymbol",
    "TrackStart",
    "NotePos",
    "NoteDur",
    "NotePitch",
    "DrumPos",
    "DrumKey",
    "Terminal",
)


class _PromptBar(NamedTuple):
    sec: int
    bpm: int
    chords: tuple[tuple[int, int], ...]  # (step, chord index)
    tracks: int  # bitmask over the 5 tracks


def _canonical_chord(text) -> str:
    try:
        return normalize_chord_symbol(str(text))
    except ValueError as exc:
        raise ControlError(str(exc)) from None


def parse_chords_arg(text: str) -> tuple[str, ...]:
    """Parse a progression like ``F,C,G,A:min`` into canonical symbols."""
    symbols = tuple(_canonical_chord(part) for part in text.split(",") if part.strip())
    if not symbols:
        raise ControlError("empty chord progression")
    return symbols


def parse_structure_arg(text: str) -> tuple[str, ...]:
    """Expand ``intro*4,verse*8,...`` into one section label per bar."""
    sections: list[str] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "*" in part:
            label, _, count = part.partition("*")
            label, count = label.strip(), count.strip()
        else:
            label, count = part, "1"
        if label not in SECTIONS:
            raise ControlError(f"unknown section label {label!r}")
        try:
            n = int(count)
        except ValueError:
            raise ControlError(f"bad bar count {count!r} in structure") from None
        if n < 1:
            raise ControlError(f"bar count must be >= 1 in structure, got {n}")
        sections.extend([label] * n)
    if not sections:
        raise ControlError("empty structure")
    return tuple(sections)


@dataclass(frozen=True)
class ControlSpec:
    """User inputs constraining generation; every field is optional.

    ``chords`` loops one chord per bar at step 0; ``chord_schedule``
    places chords explicitly as (bar, step, symbol) and pins the listed
    bars to exactly those chords.  ``forced_tracks`` must appear in
    every bar; ``allowed_tracks`` is the closed set a bar may use.
    """

    genre: str | None = None
    bpm_level: int | None = None
    sections: tuple[str, ...] | None = None
    chords: tuple[str, ...] | None = None
    chord_schedule: tuple[tuple[int, int, str], ...] | None = None
    allowed_tracks: frozenset[str] | None = None
    forced_tracks: frozenset[str] | None = None
    n_bars: int | None = None

    def __post_init__(self):
        if self.genre is not None and self.genre not in GENRES:
            raise ControlError(f"unknown genre {self.genre!r}")
        if self.bpm_level is not None:
            if not isinstance(self.bpm_level, int) or isinstance(self.bpm_level, bool):
                raise ControlError(f"bpm_level must be an integer, got {self.bpm_level!r}")
            if not 0 <= self.bpm_level < len(BPM_LABELS):
                raise ControlError(f"bpm_level must be 0..7, got {self.bpm_level}")
        if self.n_bars is not None:
            if not isinstance(self.n_bars, int) or isinstance(self.n_bars, bool):
                raise ControlError(f"n_bars must be an integer, got {self.n_bars!r}")
            if self.n_bars < 1:
                raise ControlError(f"n_bars must be >= 1, got {self.n_bars}")
        if self.sections is not None:
            object.__setattr__(self, "sections", tuple(self.sections))
            if not self.sections:
                raise ControlError("sections must be non-empty when given")
            for label in self.sections:
                if label not in SECTIONS:
                    raise ControlError(f"unknown section label {label!r}")
            if self.n_bars is not None and len(self.sections) != self.n_bars:
                raise ControlError(
                    f"sections length {len(self.sections)} != n_bars {self.n_bars}"
                )
        if self.chords is not None and self.chord_schedule is not None:
            raise ControlError("give chords or chord_schedule, not both")
        if self.chords is not None:
            object.__setattr__(
                self, "chords", tuple(_canonical_chord(c) for c in self.chords)
            )
            if not self.chords:
                raise ControlError("chords must be non-empty when given")
        if self.chord_schedule is not None:
            normalized = []
            for entry in self.chord_schedule:
                try:
                    bar, step, symbol = entry
                    bar, step = int(bar), int(step)
                except (TypeError, ValueError):
                    raise ControlError(
                        f"chord_schedule entries must be (bar, step, symbol), got {entry!r}"
                    ) from None
                if bar < 0:
                    raise ControlError(f"chord_schedule bar must be >= 0, got {bar}")
                if not 0 <= step < N_STEPS:
                    raise ControlError(f"chord_schedule step must be 0..15, got {step}")
                normalized.append((bar, step, _canonical_chord(symbol)))
            normalized.sort(key=lambda e: (e[0], e[1]))
            for a, b in zip(normalized, normalized[1:]):
                if a[0] == b[0] and a[1] >= b[1]:
                    raise ControlError(
                        f"chord_schedule steps must increase within bar {a[0]}"
                    )
            total = self.n_bars if self.n_bars is not None else (
                len(self.sections) if self.sections is not None else None
            )
            if total is not None and normalized[-1][0] >= total:
                raise ControlError(
                    f"chord_schedule refers to bar {normalized[-1][0]} but only "
                    f"{total} bars are requested"
                )
            object.__setattr__(self, "chord_schedule", tuple(normalized))
        for name in ("allowed_tracks", "forced_tracks"):
            value = getattr(self, name)
            if value is not None:
                value = frozenset(value)
                object.__setattr__(self, name, value)
                for label in value:
                    if label not in TRACKS:
                        raise ControlError(f"unknown track {label!r} in {name}")
        if (
            self.allowed_tracks is not None
            and self.forced_tracks is not None
            and not self.forced_tracks <= self.allowed_tracks
        ):
            raise ControlError("forced_tracks must be a subset of allowed_tracks")

    @classmethod
    def from_json(cls, doc: dict) -> "ControlSpec":
        """Build from the control-file schema (see README: control files)."""
        if not isinstance(doc, dict):
            raise ControlError("control document must be a JSON object")
        sections = None
        if doc.get("structure") is not None:
            parts = []
            for entry in doc["structure"]:
                if not isinstance(entry, (list, tuple)) or len(entry) != 2:
                    raise ControlError("structure entries must be [label, bars] pairs")
                label, bars = entry
                try:
                    parts.append(f"{label}*{int(bars)}")
                except (TypeError, ValueError):
                    raise ControlError(f"bad bar count {bars!r} in structure") from None
            sections = parse_structure_arg(",".join(parts))
        chords = doc.get("chords")
        return cls(
            genre=doc.get("genre"),
            bpm_level=doc.get("bpm_level"),
            sections=sections,
            chords=tuple(chords) if chords else None,
            allowed_tracks=(
                frozenset(doc["tracks"]) if doc.get("tracks") is not None else None
            ),
            forced_tracks=(
                frozenset(doc["forced_tracks"])
                if doc.get("forced_tracks") is not None
                else None
            ),
            n_bars=doc.get("n_bars"),
        )

    @classmethod
    def from_file(cls, path) -> "ControlSpec":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ControlError(f"control file: {exc}") from None
        return cls.from_json(doc)

    def to_json(self) -> dict:
        doc: dict = {}
        if self.genre is not None:
            doc["genre"] = self.genre
        if self.bpm_level is not None:
            doc["bpm_level"] = self.bpm_level
        if self.sections is not None:
            runs: list[list] = []
            for label in self.sections:
                if runs and runs[-1][0] == label:
                    runs[-1][1] += 1
                else:
                    runs.append([label, 1])
            doc["structure"] = runs
        if self.chords is not None:
            doc["chords"] = list(self.chords)
        if self.chord_schedule is not None:
            doc["chord_schedule"] = [list(e) for e in self.chord_schedule]
        if self.allowed_tracks is not None:
            doc["tracks"] = sorted(self.allowed_tracks, key=TRACKS.index)
        if self.forced_tracks is not None:
            doc["forced_tracks"] = sorted(self.forced_tracks, key=TRACKS.index)
        if self.n_bars is not None:
            doc["n_bars"] = self.n_bars
        return doc


class _CompiledControl:
    """ControlSpec lowered to ids and bitmasks for the mask hot path."""

    __slots__ = (
        "genre_idx",
        "bpm_idx",
        "sec_ids",
        "loop",
        "schedule",
        "allowed",
        "forced",
        "n_bars",
        "describe",
    )

    def __init__(self, spec: ControlSpec | None):
        spec = spec if spec is not None else ControlSpec()
        self.genre_idx = GENRES.index(spec.genre) if spec.genre is not None else -1
        self.bpm_idx = spec.bpm_level if spec.bpm_level is not None else -1
        self.sec_ids = (
            [SECTIONS.index(s) for s in spec.sections]
            if spec.sections is not None
            else None
        )
        self.loop = (
            [CHORDS.index(c) for c in spec.chords] if spec.chords is not None else None
        )
        self.schedule: dict[int, tuple[tuple[int, int], ...]] | None = None
        if spec.chord_schedule is not None:
            by_bar: dict[int, list[tuple[int, int]]] = {}
            for bar, step, symbol in spec.chord_schedule:
                by_bar.setdefault(bar, []).append((step, CHORDS.index(symbol)))
            self.schedule = {bar: tuple(v) for bar, v in by_bar.items()}
        self.allowed = _ALL_TRACKS_MASK
        if spec.allowed_tracks is not None:
            self.allowed = 0
            for label in spec.allowed_tracks:
                self.allowed |= 1 << TRACKS.index(label)
        self.forced = 0
        if spec.forced_tracks is not None:
            for label in spec.forced_tracks:
                self.forced |= 1 << TRACKS.index(label)
        if spec.n_bars is not None:
            self.n_bars = spec.n_bars
        elif spec.sections is not None:
            self.n_bars = len(spec.sections)
        else:
            self.n_bars = -1
        self.describe = ", ".join(f"{k}={v}" for k, v in spec.to_json().items()) or "none"

    def sched_for(self, bar: int) -> tuple[tuple[int, int], ...] | None:
        """Forced (step, chord) list for a prompt bar; None means free."""
        if self.loop is not None:
            return ((0, self.loop[bar % len(self.loop)]),)
        if self.schedule is not None:
            return self.schedule.get(bar, ())
        return None


_NO_CONTROL = _CompiledControl(None)


def compile_control(control: "ControlSpec | _CompiledControl | None") -> _CompiledControl:
    if control is None:
        return _NO_CONTROL
    if isinstance(control, _CompiledControl):
        return control
    return _CompiledControl(control)


class FsmState:
    """Decoding state; a small value owned by one session.

    ``update_state`` returns a fresh instance, so states may be retained
    (e.g. for backtracking or diagnostics) without aliasing surprises.
    """

    __slots__ = (
        "phase",
        "in_prompt",
        "bar_index",
        "step",
        "last_position",
        "current_track",
        "tracks_emitted",
        "group_count",
        "last_pitch",
        "last_drum",
        "genre",
        "cur_sec",
        "cur_bpm",
        "cur_chords",
        "prompt_bars",
        "bars_total",
    )

    def __init__(self):
        self.phase = PH_GENRE
        self.in_prompt = True
        self.bar_index = 0
        self.step = 1  # tokens consumed so far; the start token is bar
        self.last_position = -1
        self.current_track = -1
        self.tracks_emitted = 0
        self.group_count = 0
        self.last_pitch = -1
        self.last_drum = -1
        self.genre = -1
        self.cur_sec = -1
        self.cur_bpm = -1
        self.cur_chords: tuple[tuple[int, int], ...] = ()
        self.prompt_bars: tuple[_PromptBar, ...] = ()
        self.bars_total = -1

    def clone(self) -> "FsmState":
        other = FsmState.__new__(FsmState)
        for name in FsmState.__slots__:
            setattr(other, name, getattr(self, name))
        return other

    @property
    def phase_name(self) -> str:
        return PHASE_NAMES[self.phase]

    @property
    def terminal(self) -> bool:
        return self.phase == PH_TERMINAL

    def describe(self) -> str:
        section = "prompt" if self.in_prompt else "song"
        return f"{self.phase_name} in {section} bar {self.bar_index}"

    def __repr__(self) -> str:
        return f"<FsmState step={self.step} {self.describe()}>"


class RuleSet:
    """Grammar productions compiled to reusable vocabulary masks."""

    def __init__(self):
        size = VOCAB_SIZE
        self.empty = np.zeros(size, dtype=bool)

        def block(base: int, count: int) -> np.ndarray:
            m = np.zeros(size, dtype=bool)
            m[base : base + count] = True
            return m

        self.genres = block(GENRE_BASE, len(GENRES))
        self.secs = block(SEC_BASE, len(SECTIONS))
        self.bpms = block(BPM_BASE, len(BPM_LABELS))
        self.chords = block(CHORD_BASE, len(CHORDS))
        self.durations = block(DUR_BASE, MAX_DURATION)
        self.pitches = block(PITCH_BASE, N_PITCHES)
        self.drums = block(DRUM_BASE, _N_DRUMS)

        # pos_from[k]: positions with step >= k (k = 16 is empty).
        self.pos_from = [block(POS_BASE + k, N_STEPS - k) for k in range(N_STEPS + 1)]
        self.pitch_from = [
            block(PITCH_BASE + k, N_PITCHES - k) for k in range(N_PITCHES + 1)
        ]
        self.drum_from = [block(DRUM_BASE + k, _N_DRUMS - k) for k in range(_N_DRUMS + 1)]


@lru_cache(maxsize=1)
def build_rules() -> RuleSet:
    return RuleSet()


def initial_state(control: ControlSpec | None = None) -> FsmState:
    """State after the start token ``bar``; the next token is bar 0's genre."""
    compile_control(control)  # raises ControlError when inconsistent
    return FsmState()


def _track_candidates(state: FsmState, cc: _CompiledControl) -> int:
    if state.in_prompt:
        allowed = cc.allowed
    else:
        allowed = state.prompt_bars[state.bar_index].tracks & cc.allowed
    candidates = allowed & ~state.tracks_emitted
    # fixed order: only tracks after every already-emitted one
    candidates &= ~((1 << state.tracks_emitted.bit_length()) - 1) & _ALL_TRACKS_MASK
    remaining_forced = cc.forced & ~state.tracks_emitted
    if remaining_forced:
        first_unmet = (remaining_forced & -remaining_forced).bit_length() - 1
        candidates &= (1 << (first_unmet + 1)) - 1
    return candidates


def _bar_end_ids(state: FsmState, cc: _CompiledControl) -> tuple[int, ...]:
    if cc.forced & ~state.tracks_emitted:
        return ()
    if state.in_prompt:
        if cc.n_bars >= 0:
            return (BAR_ID,) if state.bar_index < cc.n_bars - 1 else (EOP_ID,)
        return (BAR_ID, EOP_ID)
    if state.bar_index < state.bars_total - 1:
        return (BAR_ID,)
    return (EOS_ID,)


def _exits_into(mask: np.ndarray, state: FsmState, cc: _CompiledControl) -> None:
    candidates = _track_candidates(state, cc)
    while candidates:
        t = (candidates & -candidates).bit_length() - 1
        mask[TRACK_BASE + t] = True
        candidates &= candidates - 1
    for tid in _bar_end_ids(state, cc):
        mask[tid] = True


def mask_for_state(
    rules: RuleSet, state: FsmState, control: ControlSpec | _CompiledControl | None = None
) -> np.ndarray:
    """Boolean mask over the vocabulary of tokens legal in ``state``.

    The result is freshly allocated and safe for the caller to modify.
    Raises ConstraintConflictError when controls empty the grammar mask.
    """
    cc = compile_control(control)
    mask = rules.empty.copy()
    ph = state.phase

    if ph == PH_BAR:
        mask[BAR_ID] = True
    elif ph == PH_GENRE:
        if state.genre >= 0:
            mask[GENRE_BASE + state.genre] = True
        elif cc.genre_idx >= 0:
            mask[GENRE_BASE + cc.genre_idx] = True
        else:
            mask |= rules.genres
    elif ph == PH_SEC:
        if not state.in_prompt:
            mask[SEC_BASE + state.prompt_bars[state.bar_index].sec] = True
        elif cc.sec_ids is not None and state.bar_index < len(cc.sec_ids):
            mask[SEC_BASE + cc.sec_ids[state.bar_index]] = True
        else:
            mask |= rules.secs
    elif ph == PH_BPM:
        if not state.in_prompt:
            mask[BPM_BASE + state.prompt_bars[state.bar_index].bpm] = True
        elif cc.bpm_idx >= 0:
            mask[BPM_BASE + cc.bpm_idx] = True
        else:
            mask |= rules.bpms
    elif ph == PH_CHORD_POS:
        if state.in_prompt:
            sched = cc.sched_for(state.bar_index)
        else:
            sched = state.prompt_bars[state.bar_index].chords
        k = len(state.cur_chords)
        if sched is not None:
            if k < len(sched):
                mask[POS_BASE + sched[k][0]] = True
            else:
                _exits_into(mask, state, cc)
        else:
            last = state.cur_chords[-1][0] if state.cur_chords else -1
            mask |= rules.pos_from[last + 1]
            _exits_into(mask, state, cc)
    elif ph == PH_CHORD_SYM:
        if state.in_prompt:
            sched = cc.sched_for(state.bar_index)
        else:
            sched = state.prompt_bars[state.bar_index].chords
        if sched is not None:
            mask[CHORD_BASE + sched[len(state.cur_chords)][1]] = True
        else:
            mask |= rules.chords
    elif ph == PH_TRACK_START:
        _exits_into(mask, state, cc)
    elif ph == PH_NOTE_POS:
        if state.group_count < MAX_NOTES_PER_PART:
            mask |= rules.pos_from[max(state.last_position, 0)]
            if state.last_pitch >= N_PITCHES - 1:
                mask[POS_BASE + state.last_position] = False
        if state.group_count >= 1:
            _exits_into(mask, state, cc)
    elif ph == PH_NOTE_DUR:
        mask |= rules.durations
    elif ph == PH_NOTE_PITCH:
        if state.last_pitch >= 0:
            mask |= rules.pitch_from[state.last_pitch + 1]
        else:
            mask |= rules.pitches
    elif ph == PH_DRUM_POS:
        if state.group_count < MAX_NOTES_PER_PART:
            mask |= rules.pos_from[max(state.last_position, 0)]
            if state.last_drum >= _N_DRUMS - 1:
                mask[POS_BASE + state.last_position] = False
        if state.group_count >= 1:
            _exits_into(mask, state, cc)
    elif ph == PH_DRUM_KEY:
        if state.last_drum >= 0:
            mask |= rules.drum_from[state.last_drum + 1]
        else:
            mask |= rules.drums
    else:
        raise ValueError("terminal state has no legal continuation")

    if not mask.any():
        grammar = mask_for_state(rules, state, None)
        expects = sorted(
            {PHASE_NAMES[state.phase]}
            | {build_vocab().render(int(i)) for i in np.flatnonzero(grammar)[:8]}
        )
        raise ConstraintConflictError(
            state.step, f"{state.describe()} ({', '.join(expects)})", cc.describe
        )
    return mask


def get_sub_vocab(
    rules: RuleSet,
    state: FsmState,
    last_token: Token | int | None = None,
    control: ControlSpec | _CompiledControl | None = None,
) -> np.ndarray:
    """Legal sub-vocabulary after ``last_token`` was consumed into ``state``.

    ``last_token`` is accepted for signature compatibility with the
    decoding loop; the state alone determines the mask.
    """
    return mask_for_state(rules, state, control)


def _close_bar(state: FsmState) -> None:
    if state.in_prompt:
        state.prompt_bars = state.prompt_bars + (
            _PromptBar(state.cur_sec, state.cur_bpm, state.cur_chords, state.tracks_emitted),
        )
    state.cur_sec = -1
    state.cur_bpm = -1
    state.cur_chords = ()
    state.tracks_emitted = 0
    state.current_track = -1
    state.group_count = 0
    state.last_position = -1
    state.last_pitch = -1
    state.last_drum = -1


def _illegal(state: FsmState, token_id: int) -> Exception:
    name = build_vocab().render(token_id)
    return ValueError(
        f"illegal transition: token {name} in state {state.describe()} (step {state.step})"
    )


def update_state(rules: RuleSet, state: FsmState, token: Token | int) -> FsmState:
    """Deterministic transition; returns the successor state.

    The caller is expected to feed only tokens drawn from the state's
    mask; a cheap kind check guards against gross misuse.
    """
    token_id = token if isinstance(token, int) else build_vocab().id_of(token)
    s = state.clone()
    s.step += 1
    ph = state.phase

    if token_id == BAR_ID:
        if ph not in (PH_BAR, PH_CHORD_POS, PH_TRACK_START, PH_NOTE_POS, PH_DRUM_POS):
            raise _illegal(state, token_id)
        if ph in (PH_NOTE_POS, PH_DRUM_POS) and state.group_count < 1:
            raise _illegal(state, token_id)
        _close_bar(s)
        s.bar_index += 1
        s.phase = PH_GENRE
        return s
    if token_id == EOP_ID:
        if not state.in_prompt or ph not in (PH_CHORD_POS, PH_TRACK_START):
            raise _illegal(state, token_id)
        _close_bar(s)
        s.bars_total = len(s.prompt_bars)
        s.in_prompt = False
        s.bar_index = -1
        s.phase = PH_BAR
        return s
    if token_id == EOS_ID:
        if state.in_prompt or ph not in (PH_CHORD_POS, PH_NOTE_POS, PH_DRUM_POS):
            raise _illegal(state, token_id)
        if ph in (PH_NOTE_POS, PH_DRUM_POS) and state.group_count < 1:
            raise _illegal(state, token_id)
        _close_bar(s)
        s.phase = PH_TERMINAL
        return s

    if ph == PH_GENRE:
        if not GENRE_BASE <= token_id < GENRE_BASE + len(GENRES):
            raise _illegal(state, token_id)
        if s.genre < 0:
            s.genre = token_id - GENRE_BASE
        elif token_id - GENRE_BASE != s.genre:
            raise _illegal(state, token_id)
        s.phase = PH_SEC
    elif ph == PH_SEC:
        if not SEC_BASE <= token_id < SEC_BASE + len(SECTIONS):
            raise _illegal(state, token_id)
        s.cur_sec = token_id - SEC_BASE
        s.phase = PH_BPM
    elif ph == PH_BPM:
        if not BPM_BASE <= token_id < BPM_BASE + len(BPM_LABELS):
            raise _illegal(state, token_id)
        s.cur_bpm = token_id - BPM_BASE
        s.phase = PH_CHORD_POS
        s.last_position = -1
    elif ph == PH_CHORD_POS:
        if POS_BASE <= token_id < POS_BASE + N_STEPS:
            s.last_position = token_id - POS_BASE
            s.phase = PH_CHORD_SYM
        elif TRACK_BASE <= token_id < TRACK_BASE + len(TRACKS):
            _enter_track(s, token_id - TRACK_BASE, state)
        else:
            raise _illegal(state, token_id)
    elif ph == PH_CHORD_SYM:
        if not CHORD_BASE <= token_id < CHORD_BASE + len(CHORDS):
            raise _illegal(state, token_id)
        s.cur_chords = s.cur_chords + ((s.last_position, token_id - CHORD_BASE),)
        s.phase = PH_CHORD_POS
    elif ph == PH_TRACK_START:
        if TRACK_BASE <= token_id < TRACK_BASE + len(TRACKS):
            _enter_track(s, token_id - TRACK_BASE, state)
        else:
            raise _illegal(state, token_id)
    elif ph == PH_NOTE_POS:
        if POS_BASE <= token_id < POS_BASE + N_STEPS:
            step = token_id - POS_BASE
            if step < state.last_position:
                raise _illegal(state, token_id)
            if not (state.group_count and step == state.last_position):
                s.last_pitch = -1
            s.last_position = step
            s.phase = PH_NOTE_DUR
        elif TRACK_BASE <= token_id < TRACK_BASE + len(TRACKS) and state.group_count:
            _enter_track(s, token_id - TRACK_BASE, state)
        else:
            raise _illegal(state, token_id)
    elif ph == PH_NOTE_DUR:
        if not DUR_BASE <= token_id < DUR_BASE + MAX_DURATION:
            raise _illegal(state, token_id)
        s.phase = PH_NOTE_PITCH
    elif ph == PH_NOTE_PITCH:
        if not PITCH_BASE <= token_id < PITCH_BASE + N_PITCHES:
            raise _illegal(state, token_id)
        s.last_pitch = token_id - PITCH_BASE
        s.group_count += 1
        s.phase = PH_NOTE_POS
    elif ph == PH_DRUM_POS:
        if POS_BASE <= token_id < POS_BASE + N_STEPS:
            step = token_id - POS_BASE
            if step < state.last_position:
                raise _illegal(state, token_id)
            if not (state.group_count and step == state.last_position):
                s.last_drum = -1
            s.last_position = step
            s.phase = PH_DRUM_KEY
        else:
            raise _illegal(state, token_id)
    elif ph == PH_DRUM_KEY:
        if not DRUM_BASE <= token_id < DRUM_BASE + _N_DRUMS:
            raise _illegal(state, token_id)
        s.last_drum = token_id - DRUM_BASE
        s.group_count += 1
        s.phase = PH_DRUM_POS
    else:
        raise _illegal(state, token_id)
    return s


def _enter_track(s: FsmState, track: int, before: FsmState) -> None:
    if track <= before.tracks_emitted.bit_length() - 1:
        raise _illegal(before, TRACK_BASE + track)
    s.tracks_emitted |= 1 << track
    s.current_track = track
    s.group_count = 0
    s.last_position = -1
    s.last_pitch = -1
    s.last_drum = -1
    if s.in_prompt:
        s.phase = PH_TRACK_START
    elif track == _DRUMS_TRACK:
        s.phase = PH_DRUM_POS
    else:
        s.phase = PH_NOTE_POS


def replay(
    rules: RuleSet,
    seq: list[int],
    control: ControlSpec | None = None,
    check_masks: bool = True,
) -> FsmState:
    """Drive the machine over a full sequence (first token must be bar).

    With ``check_masks`` every token is verified against the preceding
    mask, which makes this a completeness check for encoder output.
    """
    if not seq or seq[0] != BAR_ID:
        raise ValueError("sequence must start with the bar token")
    cc = compile_control(control)
    state = initial_state(control)
    for token_id in seq[1:]:
        if check_masks:
            mask = mask_for_state(rules, state, cc)
            if not mask[token_id]:
                raise _illegal(state, token_id)
        state = update_state(rules, state, token_id)
    return state
