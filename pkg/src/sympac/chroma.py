"""Chroma-template chord detection for generated bars.

A 12-dimensional pitch-class template is learned per chord class (major
and minor) by rotating each labeled region's chroma to a common root and
averaging.  Detection scores a bar's chroma against all 24 root-rotated
templates by cosine similarity and reports the best, falling back to N
for silent bars or weak matches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .ingest import GridBar, GridSong
from .vocab import N_STEPS, NO_CHORD, ROOTS, chord_quality, chord_root_index

DEFAULT_THRESHOLD = 0.5
_CLASSES = ("maj", "min")


@dataclass(frozen=True)
class TemplateBank:
    """L2-normalized 12-d chroma template per chord class, plus a flat N."""

    maj: np.ndarray
    min: np.ndarray
    n: np.ndarray

    def template(self, quality: str) -> np.ndarray:
        if quality == "maj":
            return self.maj
        if quality == "min":
            return self.min
        if quality == NO_CHORD:
            return self.n
        raise KeyError(quality)

    def to_json(self) -> dict:
        return {
            "maj": [float(x) for x in self.maj],
            "min": [float(x) for x in self.min],
            "N": [float(x) for x in self.n],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TemplateBank":
        def vec(key: str) -> np.ndarray:
            values = doc[key]
            if len(values) != 12:
                raise ValidationError(f"template {key!r} must have 12 entries")
            return _unit(np.asarray(values, dtype=float))

        return cls(maj=vec("maj"), min=vec("min"), n=vec("N"))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "TemplateBank":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0:
        raise ValidationError("zero template")
    return v / norm


def ideal_bank() -> TemplateBank:
    """Root-position triad templates; exact on synthetic triads."""
    maj = np.zeros(12)
    maj[[0, 4, 7]] = 1.0
    minor = np.zeros(12)
    minor[[0, 3, 7]] = 1.0
    return TemplateBank(maj=_unit(maj), min=_unit(minor), n=_unit(np.ones(12)))


def bar_chroma(bar: GridBar) -> np.ndarray:
    """Duration-weighted pitch-class mass of a bar's melodic notes."""
    chroma = np.zeros(12)
    for notes in bar.tracks.values():
        for note in notes:
            chroma[note.pitch % 12] += note.duration
    return chroma


def _region_chroma(bar: GridBar, lo: int, hi: int) -> np.ndarray:
    chroma = np.zeros(12)
    for notes in bar.tracks.values():
        for note in notes:
            if lo <= note.step < hi:
                chroma[note.pitch % 12] += note.duration
    return chroma


def learn_templates(labeled_bars: list[tuple[GridBar, list[str]]]) -> TemplateBank:
    """Learn class templates from (bar, chord symbol per beat) examples.

    Each labeled beat region's chroma is rotated by minus its root so
    all examples of a class align; templates are the normalized sums.
    Symbols outside {maj, min, N} are ignored; N regions teach nothing.
    """
    accum = {c: np.zeros(12) for c in _CLASSES}
    for bar, symbols in labeled_bars:
        n_beats = len(symbols)
        if n_beats == 0:
            continue
        for b, symbol in enumerate(symbols):
            if symbol == NO_CHORD:
                continue
            quality = chord_quality(symbol)
            if quality not in _CLASSES:
                continue
            lo = b * N_STEPS // n_beats
            hi = (b + 1) * N_STEPS // n_beats
            chroma = _region_chroma(bar, lo, hi)
            if chroma.any():
                accum[quality] += np.roll(chroma, -chord_root_index(symbol))
    missing = [c for c in _CLASSES if not accum[c].any()]
    if missing:
        raise ValidationError(f"no labeled examples for class(es): {', '.join(missing)}")
    return TemplateBank(
        maj=_unit(accum["maj"]), min=_unit(accum["min"]), n=_unit(np.ones(12))
    )


def detect_chord(
    chroma: np.ndarray,
    bank: TemplateBank | None = None,
    threshold: float = DEFAULT_THRESHOLD,
) -> str:
    """Best of the 24 root-rotated class templates by cosine score.

    Returns N for a silent chroma or when the best score falls below
    the threshold.  Ties break toward the lower root, major before
    minor.
    """
    bank = bank or ideal_bank()
    chroma = np.asarray(chroma, dtype=float)
    norm = float(np.linalg.norm(chroma))
    if norm == 0:
        return NO_CHORD
    unit = chroma / norm
    best_score = -np.inf
    best_symbol = NO_CHORD
    for quality in _CLASSES:
        template = bank.template(quality)
        for root in range(12):
            score = float(np.dot(unit, np.roll(template, root)))
            if score > best_score + 1e-12:
                best_score = score
                best_symbol = f"{ROOTS[root]}:{quality}"
    if best_score < threshold:
        return NO_CHORD
    return best_symbol


def detect_bar_chords(song: GridSong, bank: TemplateBank | None = None) -> list[str]:
    """Detected chord symbol for every bar of a song."""
    return [detect_chord(bar_chroma(bar), bank) for bar in song.bars]


def chord_accuracy(
    generated: list[GridSong],
    intended: list[str],
    bank: TemplateBank | None = None,
) -> float | None:
    """Fraction of bars whose detected chord equals the intended one.

    ``intended`` lists one chord per bar and must match every song's
    bar count.  Bars whose intended chord is N are excluded; when
    nothing is countable the accuracy is undefined and None is
    returned.
    """
    bank = bank or ideal_bank()
    matched = 0
    counted = 0
    for song in generated:
        if len(intended) != len(song.bars):
            raise ValidationError(
                f"schedule length {len(intended)} != bar count {len(song.bars)}"
            )
        detected = detect_bar_chords(song, bank)
        for want, got in zip(intended, detected):
            if want == NO_CHORD:
                continue
            counted += 1
            if want == got:
                matched += 1
    if counted == 0:
        return None
    return matched / counted
