"""Corpus-level distribution metrics and KL-divergence comparison.

Seventeen metric families describe a corpus: three chord metrics
(sampled one chord per beat with carry-over), three structure metrics,
seven note metrics per melodic track, and four drum metrics.  Each
yields a discrete distribution; corpora are compared metric by metric
with smoothed KL divergence and averaged within seven metric classes
(chord, structure, one per melodic track, drums).
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

from .ingest import GridSong
from .vocab import NO_CHORD, TRACKS, chord_root

DEFAULT_EPSILON = 1e-6
_BEAT_STEPS = (0, 4, 8, 12)
_UNIFORMITY_BIN = 0.05

# Metric display order follows the per-metric report layout.
METRIC_TRACK_ORDER = ("vocal", "guitar", "piano", "bass")
_TRACK_METRIC_SUFFIXES = (
    ("note_pitch", "Note Pitch"),
    ("note_duration", "Note Duration"),
    ("pitch_class", "Pitch Class"),
    ("min_pitch_per_bar", "Min Pitch Per Bar"),
    ("max_pitch_per_bar", "Max Pitch Per Bar"),
    ("max_notes_per_bar", "Max #Notes"),
    ("notes_uniformity", "#Notes Uniformity"),
)

METRIC_CLASSES: dict[str, tuple[str, ...]] = {
    "Chord": ("chord_label", "chord_root", "chord_transition"),
    "Structure": ("section_label", "section_label_bigram", "instrument_labels_per_bar"),
    **{
        f"{track.capitalize()} Note": tuple(
            f"{track}_{suffix}" for suffix, _ in _TRACK_METRIC_SUFFIXES
        )
        for track in METRIC_TRACK_ORDER
    },
    "Drum Note": ("drum_pitch", "max_drums_per_bar", "drum_uniformity", "unique_drums_per_bar"),
}

ALL_METRICS: tuple[str, ...] = tuple(
    name for names in METRIC_CLASSES.values() for name in names
)

METRIC_DISPLAY: dict[str, str] = {
    "chord_label": "Chord Label",
    "chord_root": "Chord Root",
    "chord_transition": "Chord Transition",
    "section_label": "Section Label",
    "section_label_bigram": "Section Label Bigram",
    "instrument_labels_per_bar": "Instrument Labels Per Bar",
    "drum_pitch": "Drum Pitch",
    "max_drums_per_bar": "Max #Drum",
    "drum_uniformity": "#Drum Uniformity",
    "unique_drums_per_bar": "Unique Drums Per Bar",
    **{
        f"{track}_{suffix}": display
        for track in METRIC_TRACK_ORDER
        for suffix, display in _TRACK_METRIC_SUFFIXES
    },
}


@dataclass(frozen=True)
class MetricDistribution:
    """A named histogram over a metric's discrete value space."""

    metric_name: str
    bins: dict
    support_size: int

    @classmethod
    def from_values(cls, metric_name: str, values: Iterable) -> "MetricDistribution":
        counts = Counter(values)
        total = sum(counts.values())
        if total == 0:
            raise ValueError(f"no observations for metric {metric_name!r}")
        bins = {value: count / total for value, count in counts.items()}
        return cls(metric_name=metric_name, bins=bins, support_size=len(bins))


def beat_chords(song: GridSong) -> list[str]:
    """One chord symbol per beat (4 beats per bar), carrying the active
    chord across beats and bars; N before any chord appears."""
    out = []
    current = NO_CHORD
    for bar in song.bars:
        for beat_step in _BEAT_STEPS:
            for step, symbol in bar.chords:
                if step <= beat_step:
                    current = symbol
                else:
                    break
            out.append(current)
    return out


def _section_runs(song: GridSong) -> list[tuple[str, int]]:
    runs: list[list] = []
    for bar in song.bars:
        if runs and runs[-1][0] == bar.section:
            runs[-1][1] += 1
        else:
            runs.append([bar.section, 1])
    return [(label, n) for label, n in runs]


def _uniformity(counts: list[int]) -> float | None:
    total = sum(counts)
    if total == 0:
        return None
    n_bars = len(counts)
    entropy = 0.0
    for c in counts:
        if c:
            p = c / total
            entropy += p * math.log(p * n_bars)
    return entropy


def _bin_uniformity(value: float) -> float:
    return round(math.floor(value / _UNIFORMITY_BIN) * _UNIFORMITY_BIN, 2)


def _iter_chord_label(song: GridSong) -> Iterator:
    yield from beat_chords(song)


def _iter_chord_root(song: GridSong) -> Iterator:
    for symbol in beat_chords(song):
        yield chord_root(symbol)


def _iter_chord_transition(song: GridSong) -> Iterator:
    stream = beat_chords(song)
    for a, b in zip(stream, stream[1:]):
        if a != b:
            yield (a, b)


def _iter_section_label(song: GridSong) -> Iterator:
    for bar in song.bars:
        yield bar.section


def _iter_section_bigram(song: GridSong) -> Iterator:
    runs = _section_runs(song)
    for (a, _), (b, _) in zip(runs, runs[1:]):
        yield (a, b)


def _iter_instrument_labels(song: GridSong) -> Iterator:
    for bar in song.bars:
        present = tuple(
            label
            for label in TRACKS
            if (label == "drums" and bar.drums) or bar.tracks.get(label)
        )
        yield present


def _track_metric(track: str, suffix: str) -> Callable[[GridSong], Iterator]:
    def iter_note_pitch(song):
        for bar in song.bars:
            for note in bar.tracks.get(track, ()):
                yield note.pitch

    def iter_note_duration(song):
        for bar in song.bars:
            for note in bar.tracks.get(track, ()):
                yield note.duration

    def iter_pitch_class(song):
        for bar in song.bars:
            for note in bar.tracks.get(track, ()):
                yield note.pitch % 12

    def iter_min_pitch(song):
        for bar in song.bars:
            notes = bar.tracks.get(track)
            if notes:
                yield min(n.pitch for n in notes)

    def iter_max_pitch(song):
        for bar in song.bars:
            notes = bar.tracks.get(track)
            if notes:
                yield max(n.pitch for n in notes)

    def iter_max_notes(song):
        counts = [len(bar.tracks.get(track, ())) for bar in song.bars]
        if any(counts):
            yield max(counts)

    def iter_uniformity(song):
        value = _uniformity([len(bar.tracks.get(track, ())) for bar in song.bars])
        if value is not None:
            yield _bin_uniformity(value)

    return {
        "note_pitch": iter_note_pitch,
        "note_duration": iter_note_duration,
        "pitch_class": iter_pitch_class,
        "min_pitch_per_bar": iter_min_pitch,
        "max_pitch_per_bar": iter_max_pitch,
        "max_notes_per_bar": iter_max_notes,
        "notes_uniformity": iter_uniformity,
    }[suffix]


def _iter_drum_pitch(song: GridSong) -> Iterator:
    for bar in song.bars:
        for _, key in bar.drums:
            yield key


def _iter_max_drums(song: GridSong) -> Iterator:
    counts = [len(bar.drums) for bar in song.bars]
    if any(counts):
        yield max(counts)


def _iter_drum_uniformity(song: GridSong) -> Iterator:
    value = _uniformity([len(bar.drums) for bar in song.bars])
    if value is not None:
        yield _bin_uniformity(value)


def _iter_unique_drums(song: GridSong) -> Iterator:
    for bar in song.bars:
        if bar.drums:
            yield tuple(sorted({key for _, key in bar.drums}))


def _extractor(metric_name: str) -> Callable[[GridSong], Iterator]:
    simple = {
        "chord_label": _iter_chord_label,
        "chord_root": _iter_chord_root,
        "chord_transition": _iter_chord_transition,
        "section_label": _iter_section_label,
        "section_label_bigram": _iter_section_bigram,
        "instrument_labels_per_bar": _iter_instrument_labels,
        "drum_pitch": _iter_drum_pitch,
        "max_drums_per_bar": _iter_max_drums,
        "drum_uniformity": _iter_drum_uniformity,
        "unique_drums_per_bar": _iter_unique_drums,
    }
    if metric_name in simple:
        return simple[metric_name]
    for track in METRIC_TRACK_ORDER:
        prefix = f"{track}_"
        if metric_name.startswith(prefix):
            suffix = metric_name[len(prefix) :]
            if any(suffix == s for s, _ in _TRACK_METRIC_SUFFIXES):
                return _track_metric(track, suffix)
    raise ValueError(f"unknown metric {metric_name!r}")


def extract_metric(corpus: list[GridSong], metric_name: str) -> MetricDistribution:
    """Distribution of one metric over a corpus.

    Raises ValueError for an unknown metric name or when the corpus has
    no observations for it (e.g. a track that never plays).
    """
    if not corpus:
        raise ValueError("corpus is empty")
    iterate = _extractor(metric_name)

    def values():
        for song in corpus:
            yield from iterate(song)

    return MetricDistribution.from_values(metric_name, values())


def kld(
    p: MetricDistribution, q: MetricDistribution, epsilon: float = DEFAULT_EPSILON
) -> float:
    """D(p || q) over the union support.

    Values missing from q are floored at ``epsilon`` and q renormalized,
    so the divergence is always finite; identical distributions score
    exactly zero because no flooring is needed.
    """
    if p.metric_name != q.metric_name:
        raise ValueError(f"metric mismatch: {p.metric_name!r} vs {q.metric_name!r}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    union = set(p.bins) | set(q.bins)
    missing = len(union) - len(q.bins)
    q_norm = 1.0 + epsilon * missing
    total = 0.0
    for value, p_v in p.bins.items():
        if p_v <= 0:
            continue
        q_v = q.bins.get(value, epsilon) / q_norm
        total += p_v * math.log(p_v / q_v)
    return total


@dataclass(frozen=True)
class KldReport:
    """Per-metric divergences plus the seven class means."""

    per_metric: dict[str, float | None]
    class_means: dict[str, float | None]

    def to_json(self) -> dict:
        return {"classes": self.class_means, "metrics": self.per_metric}

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(["class", "metric", "kld"])
        for cls, names in METRIC_CLASSES.items():
            for name in names:
                value = self.per_metric.get(name)
                writer.writerow([cls, METRIC_DISPLAY[name], "" if value is None else f"{value:.6f}"])
        return out.getvalue()

    def to_text(self) -> str:
        lines = ["Metric Class         KLD", "-" * 28]
        for cls in METRIC_CLASSES:
            value = self.class_means.get(cls)
            shown = "n/a" if value is None else f"{value:.3f}"
            lines.append(f"{cls:<20} {shown}")
        lines.append("")
        lines.append("Per-metric KLD")
        lines.append("-" * 48)
        for cls, names in METRIC_CLASSES.items():
            for name in names:
                value = self.per_metric.get(name)
                shown = "n/a" if value is None else f"{value:.3f}"
                lines.append(f"{cls:<12} {METRIC_DISPLAY[name]:<28} {shown}")
        return "\n".join(lines) + "\n"


def class_report(
    gen: list[GridSong], ref: list[GridSong], epsilon: float = DEFAULT_EPSILON
) -> KldReport:
    """All per-metric KLDs (generated vs reference) and their class means.

    Metrics with no observations on either side report None and drop
    out of their class mean.
    """
    if not gen or not ref:
        raise ValueError("both corpora must be non-empty")
    per_metric: dict[str, float | None] = {}
    for name in ALL_METRICS:
        try:
            p = extract_metric(gen, name)
            q = extract_metric(ref, name)
        except ValueError:
            per_metric[name] = None
            continue
        per_metric[name] = kld(p, q, epsilon)
    class_means: dict[str, float | None] = {}
    for cls, names in METRIC_CLASSES.items():
        values = [per_metric[n] for n in names if per_metric[n] is not None]
        class_means[cls] = sum(values) / len(values) if values else None
    return KldReport(per_metric=per_metric, class_means=class_means)


def save_report(report: KldReport, dir_path, stem: str = "kld_report") -> list[str]:
    """Write JSON, text, and CSV renderings; returns the file names."""
    import pathlib

    directory = pathlib.Path(dir_path)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
    names.append(path.name)
    path = directory / f"{stem}.txt"
    path.write_text(report.to_text())
    names.append(path.name)
    path = directory / f"{stem}.csv"
    path.write_text(report.to_csv())
    names.append(path.name)
    return names
