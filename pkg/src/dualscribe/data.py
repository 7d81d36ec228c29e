"""Corpus plumbing: manifests, mixed-task epochs, filtering, synthesis.

Manifests are JSONL, one utterance per line.  An epoch is a seeded
schedule of (record, task) items; with both supervision pools present
every batch holds equal halves and the smaller pool is oversampled by
whole repetitions plus a seeded remainder draw, so the larger pool runs
exactly once per epoch and totals stay balanced.

The synthetic corpus maps every word to a unique pure tone, making
verbatim text exactly recoverable from audio, and derives subtitles from
verbatim text by a small rewrite grammar (filler deletion, word
standardization, optional seeded corruption).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .features import write_wav
from .metrics import bleu4, strip_for_scoring
from .models import Batch
from .textproc import SubwordModel, join_with_speaker_marks

# ---------------------------------------------------------------------------
# records and manifests


@dataclass
class AudioRef:
    path: str
    start: float | None = None   # seconds into the file
    end: float | None = None

    def to_json(self) -> dict:
        out: dict = {"path": self.path}
        if self.start is not None:
            out["start"] = self.start
        if self.end is not None:
            out["end"] = self.end
        return out


@dataclass
class UtteranceRecord:
    id: str
    audio: AudioRef
    speaker: str
    duration: float
    verbatim: str | None = None
    subtitle: str | None = None

    def validate(self) -> None:
        if not self.id:
            raise ContractError("record id must be non-empty")
        if self.duration <= 0:
            raise ContractError(f"{self.id}: duration {self.duration} must be > 0")
        if self.verbatim is None and self.subtitle is None:
            raise ContractError(f"{self.id}: record carries no text at all")

    def to_json(self) -> dict:
        out: dict = {
            "id": self.id,
            "audio": self.audio.to_json(),
            "speaker": self.speaker,
            "duration": self.duration,
        }
        if self.verbatim is not None:
            out["verbatim"] = self.verbatim
        if self.subtitle is not None:
            out["subtitle"] = self.subtitle
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "UtteranceRecord":
        try:
            audio = obj["audio"]
            rec = cls(
                id=obj["id"],
                audio=AudioRef(audio["path"], audio.get("start"), audio.get("end")),
                speaker=obj["speaker"],
                duration=float(obj["duration"]),
                verbatim=obj.get("verbatim"),
                subtitle=obj.get("subtitle"),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"record missing field: {exc}") from exc
        rec.validate()
        return rec


def read_manifest(path) -> list[UtteranceRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(UtteranceRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, FormatError, ContractError) as exc:
                raise FormatError(f"{path}:{ln}: {exc}") from exc
    return records


def write_manifest(path, records: list[UtteranceRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            rec.validate()
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def hours(records: list[UtteranceRecord]) -> float:
    return sum(r.duration for r in records) / 3600.0


# ---------------------------------------------------------------------------
# epoch construction


@dataclass(frozen=True)
class EpochItem:
    record: UtteranceRecord
    task: str                  # which supervision this draw trains


def _oversample(pool: list, need: int, rng: np.random.Generator) -> list:
    """`need` draws containing every pool element floor(need/len) times
    plus a without-replacement remainder, shuffled."""
    reps, rem = divmod(need, len(pool))
    out = list(pool) * reps
    if rem:
        out += [pool[i] for i in rng.choice(len(pool), size=rem, replace=False)]
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def build_epoch(verbatim_pool: list[UtteranceRecord],
                subtitle_pool: list[UtteranceRecord],
                batch_size: int, seed: int,
                merge_tasks: bool = False) -> list[list[EpochItem]]:
    """Seeded batch schedule for one epoch.

    Default mode balances: each batch is half verbatim-task, half
    subtitle-task, the smaller pool oversampled until the larger is
    spent.  With merge_tasks the pools are simply concatenated and
    shuffled (the single-stream training diet), no oversampling.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size {batch_size} must be >= 1")
    if not verbatim_pool and not subtitle_pool:
        raise ContractError("both supervision pools are empty")
    rng = np.random.default_rng(seed)
    v_items = [EpochItem(r, "verbatim") for r in verbatim_pool]
    s_items = [EpochItem(r, "subtitle") for r in subtitle_pool]

    if merge_tasks or not v_items or not s_items:
        items = v_items + s_items
        order = rng.permutation(len(items))
        items = [items[i] for i in order]
        return [items[i:i + batch_size] for i in range(0, len(items), batch_size)]

    if batch_size % 2:
        raise ConfigError(
            f"batch_size {batch_size} must be even to balance two task pools"
        )
    need = max(len(v_items), len(s_items))
    v_seq = _oversample(v_items, need, rng) if len(v_items) < need else \
        [v_items[i] for i in rng.permutation(need)]
    s_seq = _oversample(s_items, need, rng) if len(s_items) < need else \
        [s_items[i] for i in rng.permutation(need)]
    half = batch_size // 2
    return [v_seq[i:i + half] + s_seq[i:i + half]
            for i in range(0, need, half)]


def assemble_batch(items: list[EpochItem], feature_fn,
                   subwords: SubwordModel,
                   merge_tasks: bool = False) -> Batch:
    """Padded features plus encoded targets for one scheduled batch.

    ``feature_fn(record)`` supplies the (T, F) matrix.  Each item trains
    only its scheduled task; under merge_tasks the subtitle text is
    encoded into the single verbatim stream instead.
    """
    if not items:
        raise ContractError("cannot assemble an empty batch")
    feats = [np.asarray(feature_fn(item.record)) for item in items]
    t_max = max(f.shape[0] for f in feats)
    dim = feats[0].shape[1]
    padded = np.zeros((len(items), t_max, dim), dtype=np.float32)
    lens = np.zeros(len(items), dtype=np.int64)
    verbatim: list[list[int] | None] = []
    subtitle: list[list[int] | None] = []
    for i, (item, f) in enumerate(zip(items, feats)):
        padded[i, : f.shape[0]] = f
        lens[i] = f.shape[0]
        if item.task == "verbatim":
            text = item.record.verbatim
        elif item.task == "subtitle":
            text = item.record.subtitle
        else:
            raise ContractError(f"unknown task {item.task!r}")
        if text is None:
            raise ContractError(
                f"{item.record.id}: scheduled for {item.task} but has no such text"
            )
        ids = subwords.encode(text, add_sos_eos=False)
        if item.task == "verbatim" or merge_tasks:
            verbatim.append(ids)
            subtitle.append(None)
        else:
            verbatim.append(None)
            subtitle.append(ids)
    batch = Batch(padded, lens, verbatim, subtitle)
    batch.validate()
    return batch


# ---------------------------------------------------------------------------
# subtitle-quality filtering


def filter_by_bleu(pool: list[UtteranceRecord], hypotheses: dict[str, str],
                   threshold: float) -> tuple[list[UtteranceRecord], dict]:
    """Keep records whose subtitle scores >= threshold against its
    hypothesis; returns the retained pool and an hours report."""
    missing = [r.id for r in pool if r.id not in hypotheses]
    if missing:
        raise ContractError(f"no hypothesis for ids: {', '.join(missing)}")
    retained = []
    for rec in pool:
        if rec.subtitle is None:
            raise ContractError(f"{rec.id}: bleu filtering needs subtitle text")
        score = bleu4(strip_for_scoring(hypotheses[rec.id]),
                      strip_for_scoring(rec.subtitle))
        if score >= threshold:
            retained.append(rec)
    report = {
        "threshold": float(threshold),
        "total": len(pool),
        "retained": len(retained),
        "total_hours": hours(pool),
        "retained_hours": hours(retained),
    }
    return retained, report


# ---------------------------------------------------------------------------
# long-form grouping


def concat_longform(records: list[UtteranceRecord],
                    max_seconds: float = 15.0) -> list[list[UtteranceRecord]]:
    """Greedy first-fit grouping of consecutive time-ordered utterances.

    A group closes when adding the next utterance would push it past
    max_seconds.  An utterance longer than the cap by itself passes
    through as its own group, with a warning.
    """
    groups: list[list[UtteranceRecord]] = []
    cur: list[UtteranceRecord] = []
    cur_dur = 0.0
    for rec in records:
        if rec.duration > max_seconds:
            warnings.warn(
                f"{rec.id}: {rec.duration:.2f}s exceeds the {max_seconds:.2f}s "
                "long-form cap; passed through unmerged"
            )
            if cur:
                groups.append(cur)
                cur, cur_dur = [], 0.0
            groups.append([rec])
            continue
        if cur and cur_dur + rec.duration > max_seconds:
            groups.append(cur)
            cur, cur_dur = [], 0.0
        cur.append(rec)
        cur_dur += rec.duration
    if cur:
        groups.append(cur)
    return groups


def merge_group(group: list[UtteranceRecord],
                audio_path: str | None = None,
                merged_id: str | None = None) -> UtteranceRecord:
    """One record for a long-form group, speaker turns marked in the text.

    Either text stream merges only when every member carries it.  The
    caller is responsible for concatenating the audio to audio_path; a
    single-member group passes through untouched.
    """
    if not group:
        raise ContractError("cannot merge an empty group")
    if len(group) == 1:
        return group[0]
    if audio_path is None:
        raise ContractError("merging multiple utterances needs a target audio path")
    speakers = [r.speaker for r in group]

    def joined(texts):
        if any(t is None for t in texts):
            return None
        return join_with_speaker_marks(texts, speakers)

    rec = UtteranceRecord(
        id=merged_id or "+".join(r.id for r in group),
        audio=AudioRef(audio_path),
        speaker=group[0].speaker,
        duration=sum(r.duration for r in group),
        verbatim=joined([r.verbatim for r in group]),
        subtitle=joined([r.subtitle for r in group]),
    )
    rec.validate()
    return rec


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a deterministic tone-word corpus."""

    vocab: tuple[str, ...] = (
        "ada", "bel", "cor", "dun", "eda", "fin", "gor", "hul", "ida", "jon",
        "kel", "lim", "mor", "nil", "ora", "pim", "qua", "rud", "sif", "tam",
    )
    fillers: tuple[str, ...] = ("uh", "um")      # dropped from subtitles
    substitutions: tuple[tuple[str, str], ...] = ()   # standardization pairs
    n_utterances: int = 50
    min_words: int = 3
    max_words: int = 8
    filler_prob: float = 0.25
    corruption_prob: float = 0.0   # chance a subtitle word turns random
    n_speakers: int = 3
    sample_rate: int = 16000
    tone_seconds: float = 0.16
    gap_seconds: float = 0.04

    def validate(self) -> None:
        if not self.vocab:
            raise ConfigError("synth vocab is empty")
        if set(self.vocab) & set(self.fillers):
            raise ConfigError("fillers must be distinct from content words")
        if self.n_utterances < 1 or self.min_words < 1 \
                or self.max_words < self.min_words:
            raise ConfigError("bad utterance count or word range")
        if not (0.0 <= self.filler_prob <= 1.0) \
                or not (0.0 <= self.corruption_prob <= 1.0):
            raise ConfigError("probabilities must lie in [0, 1]")


def _word_tone(word_index: int, n_words: int, spec: SynthSpec) -> np.ndarray:
    """A unique constant-frequency tone per word, hann-shaped at the ends."""
    n = int(spec.sample_rate * spec.tone_seconds)
    freq = 250.0 + 3400.0 * (word_index + 1) / (n_words + 1)
    t = np.arange(n) / spec.sample_rate
    tone = 0.5 * np.sin(2 * np.pi * freq * t)
    ramp = min(80, n // 4)
    env = np.ones(n)
    env[:ramp] = np.linspace(0.0, 1.0, ramp)
    env[-ramp:] = np.linspace(1.0, 0.0, ramp)
    return tone * env


def rewrite_subtitle(words: list[str], spec: SynthSpec,
                     rng: np.random.Generator | None = None) -> list[str]:
    """Apply the rewrite grammar: drop fillers, standardize, corrupt."""
    subs = dict(spec.substitutions)
    out = [subs.get(w, w) for w in words if w not in spec.fillers]
    if rng is not None and spec.corruption_prob > 0.0:
        out = [spec.vocab[int(rng.integers(len(spec.vocab)))]
               if rng.random() < spec.corruption_prob else w
               for w in out]
    return out


def synth_corpus(spec: SynthSpec, out_dir, seed: int = 0) -> list[UtteranceRecord]:
    """Write wavs plus manifest.jsonl under out_dir; return the records."""
    spec.validate()
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    all_words = list(spec.vocab) + list(spec.fillers)
    gap = np.zeros(int(spec.sample_rate * spec.gap_seconds))
    records = []
    for u in range(spec.n_utterances):
        n_words = int(rng.integers(spec.min_words, spec.max_words + 1))
        words = []
        for k in range(n_words):
            # the first word is always content, so the subtitle never
            # rewrites down to nothing
            if k > 0 and spec.fillers and rng.random() < spec.filler_prob:
                words.append(spec.fillers[int(rng.integers(len(spec.fillers)))])
            else:
                words.append(spec.vocab[int(rng.integers(len(spec.vocab)))])
        pieces = []
        for w in words:
            pieces.append(_word_tone(all_words.index(w), len(all_words), spec))
            pieces.append(gap)
        wav = np.concatenate(pieces[:-1])
        rec_id = f"utt{u:04d}"
        path = wav_dir / f"{rec_id}.wav"
        write_wav(path, wav, spec.sample_rate)
        subtitle = rewrite_subtitle(words, spec, rng)
        records.append(UtteranceRecord(
            id=rec_id,
            audio=AudioRef(str(path)),
            speaker=f"spk{u % spec.n_speakers}",
            duration=len(wav) / spec.sample_rate,
            verbatim=" ".join(words),
            subtitle=" ".join(subtitle) if subtitle else None,
        ))
    write_manifest(out_dir / "manifest.jsonl", records)
    return records
