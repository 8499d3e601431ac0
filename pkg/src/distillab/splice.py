"""Corpus handling and waveform augmentation.

Utterances are mono 16 kHz float waveforms in [-1, 1]. Syllable spans
partition each utterance into segments (syllable start to next syllable
start, trailing audio travels with the last syllable, leading audio is
pinned at the front), and the splicing augmentation shuffles those
segments. Batch mixing adds a scaled slice of another utterance over a
random sub-region. A synthetic mini-language generator emits small
deterministic corpora with exact alignments for experiments.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError, ParseError

SAMPLE_RATE = 16000


@dataclass
class Utterance:
    id: str
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise ArgumentError(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ArgumentError("samples must be a non-empty 1-D array")

    def __len__(self):
        return len(self.samples)


@dataclass
class SplicedUtterance(Utterance):
    permutation: tuple[int, ...] | None = None


@dataclass(frozen=True)
class SyllableSpan:
    start: int
    end: int
    label: str


@dataclass(frozen=True)
class Segment:
    start: int
    end: int
    label: str


@dataclass(frozen=True)
class LexiconEntry:
    word: str
    syllables: tuple[tuple[str, ...], ...]


def validate_spans(spans, n_samples):
    prev_end = 0
    for sp in spans:
        if not 0 <= sp.start < sp.end <= n_samples:
            raise ArgumentError(f"span [{sp.start},{sp.end}) outside utterance of {n_samples} samples")
        if sp.start < prev_end:
            raise ArgumentError(f"span [{sp.start},{sp.end}) overlaps or precedes the previous span")
        prev_end = sp.end


def segments(utt: Utterance, spans) -> tuple[int, list[Segment]]:
    """Partition: leading region [0, first start) plus one segment per
    syllable running to the next syllable's start (last one to the end)."""
    validate_spans(spans, len(utt))
    if not spans:
        return len(utt), []
    lead = spans[0].start
    segs = []
    for i, sp in enumerate(spans):
        seg_end = spans[i + 1].start if i + 1 < len(spans) else len(utt)
        segs.append(Segment(sp.start, seg_end, sp.label))
    return lead, segs


# ---------------------------------------------------------------------------
# text formats


def parse_alignment(path, utt_lengths=None) -> dict[str, list[SyllableSpan]]:
    """One record per line: `utt-id start-sec dur-sec label`. Times become
    sample indices via round(sec * 16000)."""
    table: dict[str, list[SyllableSpan]] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        fields = raw.split()
        if len(fields) != 4:
            raise ParseError(f"expected 4 fields, got {len(fields)}", line=lineno)
        utt_id, start_s, dur_s, label = fields
        if "." in label:
            raise ParseError(f"label {label!r} contains '.'", line=lineno)
        try:
            start_sec, dur_sec = float(start_s), float(dur_s)
        except ValueError:
            raise ParseError(f"non-numeric time in {raw!r}", line=lineno)
        if dur_sec <= 0 or start_sec < 0:
            raise ParseError(f"negative or zero time in {raw!r}", line=lineno)
        start = int(round(start_sec * SAMPLE_RATE))
        end = int(round((start_sec + dur_sec) * SAMPLE_RATE))
        if end <= start:
            raise ParseError(f"span rounds to zero samples in {raw!r}", line=lineno)
        spans = table.setdefault(utt_id, [])
        if spans and start < spans[-1].end:
            raise ParseError(f"span [{start},{end}) overlaps previous span of {utt_id}", line=lineno)
        if utt_lengths is not None and end > utt_lengths.get(utt_id, end):
            raise ParseError(f"span [{start},{end}) past end of {utt_id} "
                             f"({utt_lengths[utt_id]} samples)", line=lineno)
        spans.append(SyllableSpan(start, end, label))
    return table


def write_alignment(table: dict[str, list[SyllableSpan]], path) -> None:
    # n/16000 is always exact in 7 decimals (16000 = 2^7 * 5^3), so the
    # round trip through text reproduces sample indices exactly.
    lines = []
    for utt_id, spans in table.items():
        for sp in spans:
            lines.append(f"{utt_id} {sp.start / SAMPLE_RATE:.7f} "
                         f"{(sp.end - sp.start) / SAMPLE_RATE:.7f} {sp.label}")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def parse_lexicon(path) -> list[LexiconEntry]:
    """`word<TAB>p1 p2 . p3` with '.' separating syllables."""
    entries = []
    seen = set()
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        if "\t" not in raw:
            raise ParseError("expected word<TAB>pronunciation", line=lineno)
        word, pron = raw.split("\t", 1)
        if word in seen:
            raise ParseError(f"duplicate word {word!r}", line=lineno)
        seen.add(word)
        syllables = []
        current: list[str] = []
        for tok in pron.split():
            if tok == ".":
                if not current:
                    raise ParseError(f"empty syllable in pronunciation of {word!r}", line=lineno)
                syllables.append(tuple(current))
                current = []
            else:
                current.append(tok)
        if current:
            syllables.append(tuple(current))
        if not syllables:
            raise ParseError(f"empty pronunciation for {word!r}", line=lineno)
        entries.append(LexiconEntry(word, tuple(syllables)))
    return entries


def parse_transcripts(path) -> dict[str, list[str]]:
    """`utt-id<TAB>space-separated syllable labels` per line."""
    table = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        if "\t" not in raw:
            raise ParseError("expected utt-id<TAB>labels", line=lineno)
        utt_id, labels = raw.split("\t", 1)
        if utt_id in table:
            raise ParseError(f"duplicate utterance id {utt_id!r}", line=lineno)
        table[utt_id] = labels.split()
    return table


def write_transcripts(table: dict[str, list[str]], path) -> None:
    lines = [f"{utt_id}\t{' '.join(labels)}" for utt_id, labels in table.items()]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# WAV I/O (RIFF PCM, mono, 16-bit, 16 kHz)


def write_wav(path, samples) -> None:
    x = np.clip(np.rint(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(x.astype("<i2").tobytes())


def read_wav(path) -> np.ndarray:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise FormatError(f"{path}: expected mono, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit samples")
        if w.getframerate() != SAMPLE_RATE:
            raise FormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {w.getframerate()}")
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0


# ---------------------------------------------------------------------------
# splicing


def shuffle_splice(utt: Utterance, spans, permutation, crossfade_ms: float = 0.0) -> SplicedUtterance:
    """Reassemble the utterance as leading region plus segments in permuted
    order. Zero crossfade is pure concatenation and conserves length and the
    sample multiset; a positive crossfade overlap-adds linear fades at each
    junction (shortening the output by the fade width per junction)."""
    lead, segs = segments(utt, spans)
    n = len(segs)
    perm = [int(p) for p in permutation]
    if sorted(perm) != list(range(n)):
        raise ArgumentError(f"permutation {perm} is not a bijection on 0..{n - 1}")
    pieces = [utt.samples[:lead]] if lead > 0 else []
    pieces.extend(utt.samples[segs[p].start:segs[p].end] for p in perm)
    if not pieces:
        out = utt.samples.copy()
    elif crossfade_ms <= 0:
        out = np.concatenate(pieces)
    else:
        fade = int(round(crossfade_ms * SAMPLE_RATE / 1000.0))
        out = pieces[0].copy()
        for nxt in pieces[1:]:
            f = min(fade, len(out), len(nxt))
            if f == 0:
                out = np.concatenate([out, nxt])
                continue
            ramp = (np.arange(1, f + 1, dtype=np.float32)) / (f + 1)
            blended = out[-f:] * (1.0 - ramp) + nxt[:f] * ramp
            out = np.concatenate([out[:-f], blended, nxt[f:]])
    return SplicedUtterance(utt.id, out, permutation=tuple(perm))


def maybe_shuffle(utt: Utterance, spans, rng: np.random.Generator,
                  p_shuffle: float = 0.375, crossfade_ms: float = 0.0) -> Utterance:
    """With probability p_shuffle splice under a uniform non-identity
    permutation; otherwise return the utterance unchanged. The decision
    consumes exactly one draw before any permutation draws."""
    if not 0.0 <= p_shuffle <= 1.0:
        raise ArgumentError(f"p_shuffle must be in [0,1], got {p_shuffle}")
    decided = rng.random() < p_shuffle
    n = len(spans)
    if not decided or n < 2:
        return utt
    while True:
        perm = rng.permutation(n)
        if not np.array_equal(perm, np.arange(n)):
            break
    return shuffle_splice(utt, spans, perm, crossfade_ms=crossfade_ms)


# ---------------------------------------------------------------------------
# in-batch mixing


def mix_pair(primary: Utterance, secondary: Utterance, rng: np.random.Generator,
             snr_db_range=(0.0, 10.0), max_overlap: float = 0.5) -> Utterance:
    """Add a scaled random slice of the secondary over a random sub-region of
    the primary. Draw order: region length, primary start, secondary start,
    SNR. The scale sqrt(E_p / (E_s * 10^(snr/10))) sets the region-level SNR;
    a zero-energy secondary slice skips mixing and returns the primary as is."""
    max_len = min(int(max_overlap * len(primary)), len(secondary))
    if max_len < 1:
        return primary
    length = int(rng.integers(1, max_len + 1))
    p_start = int(rng.integers(0, len(primary) - length + 1))
    s_start = int(rng.integers(0, len(secondary) - length + 1))
    snr_db = float(rng.uniform(snr_db_range[0], snr_db_range[1]))
    region = primary.samples[p_start:p_start + length].astype(np.float64)
    slice_ = secondary.samples[s_start:s_start + length].astype(np.float64)
    e_p = float(np.sum(region ** 2))
    e_s = float(np.sum(slice_ ** 2))
    if e_s == 0.0:
        return primary
    scale = np.sqrt(e_p / (e_s * 10.0 ** (snr_db / 10.0)))
    out = primary.samples.copy()
    mixed = region + scale * slice_
    out[p_start:p_start + length] = np.clip(mixed, -1.0, 1.0).astype(np.float32)
    return Utterance(primary.id, out)


def batch_mix(batch, rng: np.random.Generator, p_mix: float = 0.15,
              snr_db_range=(0.0, 10.0), max_overlap: float = 0.5):
    """Independently select each utterance with probability p_mix and mix it
    with a uniformly drawn other batch member (taken from the batch as it was
    before any mixing). A batch of one is returned unchanged."""
    if not 0.0 <= p_mix <= 1.0:
        raise ArgumentError(f"p_mix must be in [0,1], got {p_mix}")
    if len(batch) < 2:
        return list(batch)
    snapshot = list(batch)
    out = []
    for i, utt in enumerate(snapshot):
        if rng.random() < p_mix:
            j = int(rng.integers(0, len(snapshot) - 1))
            if j >= i:
                j += 1
            out.append(mix_pair(utt, snapshot[j], rng, snr_db_range, max_overlap))
        else:
            out.append(utt)
    return out


# ---------------------------------------------------------------------------
# synthetic mini-language corpus

_CONSONANTS = "btdkgpmnsrlf"
_VOWELS = "aeiou"
_LEAD_MS = 40
_TAIL_MS = 40
_MAX_GAP_MS = 30


def syllable_inventory(size: int) -> list[str]:
    labels = [c + v for c in _CONSONANTS for v in _VOWELS]
    if not 2 <= size <= len(labels):
        raise ArgumentError(f"inventory size must be in [2,{len(labels)}], got {size}")
    return labels[:size]


def syllable_tone(label: str, n_samples: int) -> np.ndarray:
    """Deterministic two-formant tone for a syllable label, with a raised-
    cosine amplitude envelope. Same label always yields the same shape."""
    c, v = label[0], label[1]
    f1 = 280.0 + 55.0 * _VOWELS.index(v)
    f2 = 900.0 + 130.0 * _CONSONANTS.index(c)
    t = np.arange(n_samples, dtype=np.float64) / SAMPLE_RATE
    env = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_samples) / max(n_samples - 1, 1))
    tone = 0.55 * np.sin(2.0 * np.pi * f1 * t) + 0.35 * np.sin(2.0 * np.pi * f2 * t)
    return (tone * env).astype(np.float32)


def generate_synthetic_corpus(spec: dict, out_dir) -> dict:
    """Emit wav/<utt-id>.wav files, alignment.txt, transcripts.txt, and
    corpus.json under out_dir. Same spec and seed give byte-identical files.

    spec keys: n_utts, syllable_inventory_size, syllables_per_utt_range
    (inclusive), syllable_ms_range (inclusive), seed.
    """
    n_utts = int(spec["n_utts"])
    if n_utts < 0:
        raise ArgumentError("n_utts must be non-negative")
    inventory = syllable_inventory(int(spec["syllable_inventory_size"]))
    syl_lo, syl_hi = (int(x) for x in spec["syllables_per_utt_range"])
    ms_lo, ms_hi = (int(x) for x in spec["syllable_ms_range"])
    if syl_lo < 1 or syl_hi < syl_lo:
        raise ArgumentError(f"bad syllables_per_utt_range ({syl_lo},{syl_hi})")
    if ms_lo < 40 or ms_hi < ms_lo:
        raise ArgumentError(f"syllable durations must be >= 40 ms, got ({ms_lo},{ms_hi})")
    seed = int(spec["seed"])
    rng = np.random.default_rng(seed)

    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)

    alignment: dict[str, list[SyllableSpan]] = {}
    transcripts: dict[str, list[str]] = {}
    utt_ids = []
    for u in range(n_utts):
        utt_id = f"utt{u:05d}"
        n_syll = int(rng.integers(syl_lo, syl_hi + 1))
        pieces = [np.zeros(_LEAD_MS * SAMPLE_RATE // 1000, dtype=np.float32)]
        pos = len(pieces[0])
        spans = []
        labels = []
        for k in range(n_syll):
            label = inventory[int(rng.integers(0, len(inventory)))]
            dur = int(rng.integers(ms_lo, ms_hi + 1)) * SAMPLE_RATE // 1000
            pieces.append(syllable_tone(label, dur))
            spans.append(SyllableSpan(pos, pos + dur, label))
            labels.append(label)
            pos += dur
            if k + 1 < n_syll:
                gap = int(rng.integers(0, _MAX_GAP_MS + 1)) * SAMPLE_RATE // 1000
                if gap:
                    pieces.append(np.zeros(gap, dtype=np.float32))
                    pos += gap
        pieces.append(np.zeros(_TAIL_MS * SAMPLE_RATE // 1000, dtype=np.float32))
        samples = np.concatenate(pieces)
        write_wav(wav_dir / f"{utt_id}.wav", samples)
        alignment[utt_id] = spans
        transcripts[utt_id] = labels
        utt_ids.append(utt_id)

    write_alignment(alignment, out_dir / "alignment.txt")
    write_transcripts(transcripts, out_dir / "transcripts.txt")
    manifest = {
        "spec": {"n_utts": n_utts,
                 "syllable_inventory_size": len(inventory),
                 "syllables_per_utt_range": [syl_lo, syl_hi],
                 "syllable_ms_range": [ms_lo, ms_hi],
                 "seed": seed},
        "inventory": inventory,
        "utt_ids": utt_ids,
    }
    (out_dir / "corpus.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return manifest


@dataclass
class Corpus:
    utterances: list[Utterance]
    spans: dict[str, list[SyllableSpan]]
    transcripts: dict[str, list[str]]
    inventory: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.utterances)


def load_corpus(corpus_dir) -> Corpus:
    corpus_dir = Path(corpus_dir)
    manifest = json.loads((corpus_dir / "corpus.json").read_text(encoding="utf-8"))
    utts = [Utterance(u, read_wav(corpus_dir / "wav" / f"{u}.wav"))
            for u in manifest["utt_ids"]]
    lengths = {u.id: len(u) for u in utts}
    spans = parse_alignment(corpus_dir / "alignment.txt", utt_lengths=lengths)
    transcripts = parse_transcripts(corpus_dir / "transcripts.txt")
    for u in utts:
        validate_spans(spans.get(u.id, []), len(u))
    return Corpus(utts, spans, transcripts, manifest.get("inventory", []))
