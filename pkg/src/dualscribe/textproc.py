"""Text pipeline: normalization, subword model, speaker-turn markup.

The subword model is a byte-pair-style tokenizer over word-boundary marked
symbols: the first character of every word carries a leading U+2581 mark, so
pieces never cross word boundaries and decoding is a pure string join.
Seven special ids are pinned at the bottom of every vocabulary:

    0 <blank>  CTC blank
    1 <unk>    unknown character fallback
    2 <sos>    sequence start
    3 <eos>    sequence end
    4 <verbatim>, 5 <subtitle>   task selectors, placed before <sos>
    6 <spk>    speaker-turn separator in merged long-form targets

Annotation tags of the form ``<...>`` found in rich-mode training text are
kept as single atomic pieces.
"""

from __future__ import annotations

import re
import unicodedata
from collections import Counter

import numpy as np

from .errors import ConfigError, ContractError, FormatError

BOUNDARY = "▁"

BLANK, UNK, SOS, EOS, TASK_VERBATIM, TASK_SUBTITLE, SPK = range(7)
SPECIAL_TOKENS = ["<blank>", "<unk>", "<sos>", "<eos>", "<verbatim>", "<subtitle>", "<spk>"]
TASK_IDS = {"verbatim": TASK_VERBATIM, "subtitle": TASK_SUBTITLE}

_TAG_RE = re.compile(r"<[^<>\s]+>")
_KEEP_RE = re.compile(r"[^a-z0-9' ]")


def normalize(text: str, mode: str = "normalized") -> str:
    """Canonicalize text; idempotent in both modes.

    ``normalized`` lowercases, strips punctuation (keeping word-internal
    apostrophes) and collapses whitespace.  ``rich`` keeps case and
    punctuation and only collapses whitespace.  ``<...>`` annotation tags
    are atomic in both modes.
    """
    if mode not in ("normalized", "rich"):
        raise ConfigError(f"unknown normalization mode {mode!r}")
    text = unicodedata.normalize("NFC", text)
    if mode == "rich":
        return " ".join(text.split())
    pieces = []
    pos = 0
    for m in _TAG_RE.finditer(text):
        pieces.append(_plain(text[pos:m.start()]))
        pieces.append(m.group(0))
        pos = m.end()
    pieces.append(_plain(text[pos:]))
    return " ".join(p for p in " ".join(pieces).split() if p)


def _plain(chunk: str) -> str:
    chunk = _KEEP_RE.sub(" ", chunk.lower())
    words = []
    for w in chunk.split():
        w = w.strip("'")
        if w:
            words.append(w)
    return " ".join(words)


def join_with_speaker_marks(texts: list[str], speakers: list[str]) -> str:
    """Join utterance texts, inserting <spk> wherever the speaker changes."""
    if len(texts) != len(speakers):
        raise ContractError("texts and speakers must align")
    out: list[str] = []
    for i, (t, s) in enumerate(zip(texts, speakers)):
        if i > 0 and s != speakers[i - 1]:
            out.append(SPECIAL_TOKENS[SPK])
        if t:
            out.append(t)
    return " ".join(out)


class SubwordModel:
    """Greedy-merge BPE with pinned specials and atomic annotation tags."""

    def __init__(self, alphabet: list[str], merges: list[tuple[str, str]],
                 tags: list[str]):
        self.alphabet = list(alphabet)
        self.merges = [tuple(m) for m in merges]
        self.tags = list(tags)
        self.pieces: list[str] = (SPECIAL_TOKENS + self.tags + self.alphabet
                                  + [a + b for a, b in self.merges])
        if len(set(self.pieces)) != len(self.pieces):
            raise FormatError("subword model contains duplicate pieces")
        self.piece_to_id = {p: i for i, p in enumerate(self.pieces)}
        self._merge_rank = {m: i for i, m in enumerate(self.merges)}
        self._atomic = set(SPECIAL_TOKENS) | set(self.tags)

    @property
    def vocab_size(self) -> int:
        return len(self.pieces)

    def id_to_piece(self, i: int) -> str:
        return self.pieces[i]

    # -- encoding ----------------------------------------------------------

    def _segment_word(self, word: str) -> list[str]:
        symbols = [BOUNDARY + word[0]] + list(word[1:])
        while len(symbols) > 1:
            best = None
            best_rank = len(self.merges)
            for a, b in zip(symbols, symbols[1:]):
                rank = self._merge_rank.get((a, b), None)
                if rank is not None and rank < best_rank:
                    best_rank = rank
                    best = (a, b)
            if best is None:
                break
            merged = []
            i = 0
            while i < len(symbols):
                if (i + 1 < len(symbols)
                        and (symbols[i], symbols[i + 1]) == best):
                    merged.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        return symbols

    def encode_pieces(self, text: str) -> list[str]:
        out: list[str] = []
        for word in text.split():
            if word in self._atomic:
                out.append(word)
            else:
                out.extend(self._segment_word(word))
        return out

    def encode(self, text: str, task: str | None = None,
               add_sos_eos: bool = True) -> list[int]:
        """Token ids for `text`; task tokens go before <sos>."""
        ids: list[int] = []
        if task is not None:
            if task not in TASK_IDS:
                raise ContractError(f"unknown task {task!r}")
            if not add_sos_eos:
                raise ContractError("task tokens require sos/eos framing")
            ids.append(TASK_IDS[task])
        if add_sos_eos:
            ids.append(SOS)
        for piece in self.encode_pieces(text):
            ids.append(self.piece_to_id.get(piece, UNK))
        if add_sos_eos:
            ids.append(EOS)
        return ids

    # -- decoding ----------------------------------------------------------

    _STRIPPED = {BLANK, UNK, SOS, EOS, TASK_VERBATIM, TASK_SUBTITLE}

    def decode(self, ids: list[int]) -> str:
        """Text for `ids`.  Structural specials are stripped; <spk> and
        annotation tags are meaningful surface content and survive."""
        parts: list[str] = []
        for i in ids:
            if i in self._STRIPPED:
                continue
            piece = self.pieces[i]
            if piece in self._atomic:
                parts.append(" " + piece)
            elif piece.startswith(BOUNDARY):
                parts.append(" " + piece[len(BOUNDARY):])
            else:
                parts.append(piece)
        return "".join(parts).strip()

    # -- persistence -------------------------------------------------------

    MAGIC = "dualscribe-subwords v1"

    def save(self, path: str) -> None:
        lines = [self.MAGIC]
        lines.append(f"specials {len(SPECIAL_TOKENS)}")
        lines.extend(SPECIAL_TOKENS)
        lines.append(f"tags {len(self.tags)}")
        lines.extend(self.tags)
        lines.append(f"alphabet {len(self.alphabet)}")
        lines.extend(self.alphabet)
        lines.append(f"merges {len(self.merges)}")
        lines.extend(f"{a}\t{b}" for a, b in self.merges)
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str) -> "SubwordModel":
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        if not lines or lines[0] != cls.MAGIC:
            raise FormatError(f"{path}: not a subword model file")
        pos = 1

        def block(name):
            nonlocal pos
            if pos >= len(lines):
                raise FormatError(f"{path}: truncated before {name} block")
            head = lines[pos].split()
            if len(head) != 2 or head[0] != name or not head[1].isdigit():
                raise FormatError(f"{path}: bad {name} header at line {pos + 1}")
            n = int(head[1])
            pos += 1
            items = lines[pos:pos + n]
            if len(items) != n:
                raise FormatError(f"{path}: truncated {name} block")
            pos += n
            return items

        specials = block("specials")
        if specials != SPECIAL_TOKENS:
            raise FormatError(f"{path}: unexpected special token inventory")
        tags = block("tags")
        alphabet = block("alphabet")
        merges = []
        for row in block("merges"):
            parts = row.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}: bad merge row {row!r}")
            merges.append((parts[0], parts[1]))
        return cls(alphabet, merges, tags)


def train_subwords(verbatim_texts: list[str], subtitle_texts: list[str],
                   vocab_size: int, seed: int = 0,
                   mode: str = "normalized") -> SubwordModel:
    """Learn a subword model from verbatim text plus a matched subtitle sample.

    The subtitle side is subsampled (seeded shuffle) to roughly the verbatim
    character volume, so neither register dominates the merge statistics.
    Merging stops when `vocab_size` pieces exist or no pair repeats.
    """
    if not verbatim_texts and not subtitle_texts:
        raise ContractError("train_subwords: empty corpus")
    verb = [normalize(t, mode) for t in verbatim_texts]
    subs = [normalize(t, mode) for t in subtitle_texts]
    budget = sum(len(t) for t in verb)
    if subs and budget > 0:
        order = np.random.default_rng(seed).permutation(len(subs))
        picked, used = [], 0
        for i in order:
            picked.append(subs[i])
            used += len(subs[i])
            if used >= budget:
                break
        subs = picked

    tags: set[str] = set()
    words: Counter[str] = Counter()
    for text in verb + subs:
        for w in text.split():
            if _TAG_RE.fullmatch(w):
                tags.add(w)
            else:
                words[w] += 1
    tag_list = sorted(tags)

    alphabet: set[str] = set()
    for w in words:
        alphabet.add(BOUNDARY + w[0])
        alphabet.update(w[1:])
    alpha_list = sorted(alphabet)

    base = len(SPECIAL_TOKENS) + len(tag_list) + len(alpha_list)
    if vocab_size < base + 1:
        raise ConfigError(
            f"vocab_size {vocab_size} below alphabet floor {base + 1}"
        )

    corpus = {w: [BOUNDARY + w[0]] + list(w[1:]) for w in words}
    merges: list[tuple[str, str]] = []
    while base + len(merges) < vocab_size:
        pair_counts: Counter[tuple[str, str]] = Counter()
        for w, syms in corpus.items():
            c = words[w]
            for a, b in zip(syms, syms[1:]):
                pair_counts[(a, b)] += c
        if not pair_counts:
            break
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < 2:
            break
        pair = best[0]
        merges.append(pair)
        for w, syms in corpus.items():
            merged = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == pair:
                    merged.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            corpus[w] = merged
    return SubwordModel(alpha_list, merges, tag_list)
