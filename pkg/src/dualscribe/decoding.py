"""Joint attention/CTC beam search over the trained variants.

The label-synchronous search expands every live hypothesis by all
non-blank tokens each step and scores extensions as

    (1 - w) * log p_att(y) + w * log p_ctc-prefix(y)

where the CTC prefix probability is computed frame-recursively per
hypothesis.  An <eos> extension consults the probability of the
hypothesis as a *complete* CTC labelling instead and retires it.
Hypotheses are ranked with a total order (score, then token sequence),
so equal-scored candidates resolve deterministically.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_ZERO, Tensor
from .errors import ConfigError, ContractError, UnsupportedTaskError
from .layers import ForwardCtx
from .models import (
    EncodedUtterances,
    Model,
    ModelVariant,
    lengths_to_mask,
)
from .textproc import BLANK, EOS, SOS, TASK_IDS, UNK

THREADS_ENV = "DUALSCRIBE_THREADS"


class CTCPrefixScorer:
    """Frame-recursive CTC prefix probabilities for one utterance.

    State per hypothesis is the (T, 2) table of log probabilities of the
    prefix with paths ending in (non-blank, blank) at each frame.
    """

    def __init__(self, log_probs: np.ndarray, blank: int = BLANK,
                 eos: int | None = EOS):
        log_probs = np.asarray(log_probs, dtype=np.float64)
        if log_probs.ndim != 2 or log_probs.shape[0] < 1:
            raise ContractError(
                f"ctc scorer needs (T, V) log probs, got {log_probs.shape}"
            )
        self.x = log_probs
        self.t, self.v = log_probs.shape
        self.blank = blank
        self.eos = eos

    def initial_state(self) -> np.ndarray:
        """State of the empty prefix: only all-blank paths."""
        r = np.full((self.t, 2), LOG_ZERO)
        r[:, 1] = np.cumsum(self.x[:, self.blank])
        return r

    def complete_score(self, r: np.ndarray) -> float:
        """Log probability that the prefix is the full labelling."""
        return float(np.logaddexp(r[-1, 0], r[-1, 1]))

    def score(self, r: np.ndarray, last: int | None, cands: np.ndarray):
        """Extend a prefix by each candidate token.

        Returns (psi, states): psi[i] is the log prefix probability after
        appending cands[i]; states[i] is its (T, 2) recursion table.  The
        blank is not a label and <eos> is handled by complete_score.
        """
        cands = np.asarray(cands)
        if np.any(cands == self.blank) or (
            self.eos is not None and np.any(cands == self.eos)
        ):
            raise ContractError("ctc candidates must exclude blank and eos")
        t, n = self.t, len(cands)
        xs = self.x[:, cands]                       # (T, N)
        r_sum = np.logaddexp(r[:, 0], r[:, 1])      # (T,)
        log_phi = np.broadcast_to(r_sum[:, None], (t, n)).copy()
        if last is not None:
            # repeated label: paths already ending in it need a blank first
            log_phi[:, cands == last] = r[:, 1:2]
        rn = np.full((t, 2, n), LOG_ZERO)
        empty = last is None
        rn[0, 0] = xs[0] if empty else LOG_ZERO
        rn[0, 1] = LOG_ZERO if empty else (r[0, 1] + self.x[0, self.blank])
        if not empty:
            rn[0, 1] = LOG_ZERO  # blank-ending requires the new label first
        psi = rn[0, 0].copy()
        for ti in range(1, t):
            rn[ti, 0] = np.logaddexp(rn[ti - 1, 0], log_phi[ti - 1]) + xs[ti]
            rn[ti, 1] = np.logaddexp(rn[ti - 1, 0], rn[ti - 1, 1]) + self.x[ti, self.blank]
            psi = np.logaddexp(psi, log_phi[ti - 1] + xs[ti])
        states = [rn[:, :, i].copy() for i in range(n)]
        return psi, states


@dataclass
class DecodeConfig:
    beam: int = 20
    ctc_weight: float = 0.3
    subtitle_ctc_weight: float = 0.0
    max_len_ratio: float = 1.0
    min_len: int = 0
    nbest: int = 1
    cascade_feed: str = "best"   # or "unk": mirror the training-side dummy

    def validate(self) -> None:
        if self.beam < 1:
            raise ConfigError(f"beam {self.beam} must be >= 1")
        if not (0.0 <= self.ctc_weight <= 1.0):
            raise ConfigError(f"ctc_weight {self.ctc_weight} outside [0, 1]")
        if not (0.0 <= self.subtitle_ctc_weight <= 1.0):
            raise ConfigError("subtitle_ctc_weight outside [0, 1]")
        if self.max_len_ratio <= 0.0:
            raise ConfigError("max_len_ratio must be positive")
        if self.min_len < 0:
            raise ConfigError("min_len must be >= 0")
        if self.nbest < 1:
            raise ConfigError("nbest must be >= 1")
        if self.cascade_feed not in ("best", "unk"):
            raise ConfigError(f"cascade_feed {self.cascade_feed!r} unknown")


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    att_score: float
    ctc_score: float | None
    finished: bool


@dataclass
class BeamResult:
    nbest: list[Hypothesis]
    pruned: bool = False   # no hypothesis reached <eos>; best live one returned

    @property
    def best(self) -> Hypothesis:
        return self.nbest[0]


@dataclass
class _Live:
    tokens: tuple[int, ...]
    att: float
    ctc_state: np.ndarray | None
    psi: float


def _rank_key(tokens: tuple[int, ...], score: float):
    return (-score, tokens)


def beam_search(att_step, vocab_size: int, max_len: int,
                ctc: CTCPrefixScorer | None, cfg: DecodeConfig,
                ctc_weight: float) -> BeamResult:
    """Label-synchronous joint search.

    ``att_step(prefixes)`` maps equal-length token prefixes to (N, V)
    next-token log probabilities.  ``ctc_weight`` mixes the prefix scorer
    in; 0 disables it even when a scorer is supplied.
    """
    cfg.validate()
    use_ctc = ctc is not None and ctc_weight > 0.0
    cands = np.array([i for i in range(vocab_size) if i not in (BLANK, EOS)])
    start = _Live(tokens=(), att=0.0,
                  ctc_state=ctc.initial_state() if use_ctc else None, psi=0.0)
    live = [start]
    done: list[Hypothesis] = []

    for step in range(max_len + 1):
        if not live:
            break
        logp = att_step([h.tokens for h in live])
        if logp.shape != (len(live), vocab_size):
            raise ContractError(
                f"att_step returned {logp.shape}, wanted {(len(live), vocab_size)}"
            )
        if step >= cfg.min_len:
            for i, h in enumerate(live):
                att_eos = h.att + float(logp[i, EOS])
                ctc_eos = None
                score = att_eos
                if use_ctc:
                    ctc_eos = ctc.complete_score(h.ctc_state)
                    score = (1.0 - ctc_weight) * att_eos + ctc_weight * ctc_eos
                done.append(Hypothesis(h.tokens, score, att_eos, ctc_eos, True))
        if step == max_len:
            break
        scored: list[tuple[tuple, float, _Live]] = []
        for i, h in enumerate(live):
            if use_ctc:
                psi, states = ctc.score(
                    h.ctc_state, h.tokens[-1] if h.tokens else None, cands
                )
            for j, c in enumerate(cands):
                att = h.att + float(logp[i, c])
                if use_ctc:
                    nh = _Live(h.tokens + (int(c),), att, states[j], float(psi[j]))
                    score = (1.0 - ctc_weight) * att + ctc_weight * nh.psi
                else:
                    nh = _Live(h.tokens + (int(c),), att, None, 0.0)
                    score = att
                scored.append((nh.tokens, score, nh))
        scored.sort(key=lambda s: _rank_key(s[0], s[1]))
        live = [s[2] for s in scored[:cfg.beam]]
        done.sort(key=lambda h: _rank_key(h.tokens, h.score))
        del done[max(cfg.beam, cfg.nbest):]
        if done and live:
            best_live = max(
                (1.0 - ctc_weight) * h.att + ctc_weight * h.psi if use_ctc else h.att
                for h in live
            )
            # scores only fall with length, so search can stop once every
            # live hypothesis is below the retained list
            if len(done) >= cfg.nbest and best_live <= done[
                min(len(done), max(cfg.beam, cfg.nbest)) - 1
            ].score:
                break

    if not done:
        fall = sorted(
            ((h.tokens,
              (1.0 - ctc_weight) * h.att + ctc_weight * h.psi if use_ctc else h.att,
              h) for h in live),
            key=lambda s: _rank_key(s[0], s[1]),
        )
        nbest = [Hypothesis(h.tokens, s, h.att, h.psi if use_ctc else None, False)
                 for _, s, h in fall[:cfg.nbest]]
        return BeamResult(nbest=nbest, pruned=True)
    # the max_len retirements arrive after the in-loop sort, so rank once more
    done.sort(key=lambda h: _rank_key(h.tokens, h.score))
    return BeamResult(nbest=done[:cfg.nbest], pruned=False)


# ---------------------------------------------------------------------------
# model-backed decoding


def _expand(t: Tensor, n: int) -> Tensor:
    return ad.embedding_lookup(t, np.zeros(n, dtype=np.int64))


def _att_step_fn(model: Model, task: str, memories, prefix_frame: list[int]):
    """Batched next-token log probabilities for equal-length prefixes."""

    def step(prefixes) -> np.ndarray:
        n = len(prefixes)
        ids = np.array([prefix_frame + list(p) for p in prefixes], dtype=np.int64)
        mems = [(_expand(mem, n), np.repeat(valid, n, axis=0))
                for mem, valid in memories]
        logits, _ = model.decoder_forward(task, ids, mems)
        last = logits.data[:, -1, :]
        last = last - last.max(axis=1, keepdims=True)
        return last - np.log(np.exp(last).sum(axis=1, keepdims=True))

    return step


def _memories_for(model: Model, task: str, enc: EncodedUtterances):
    """Which memories the task's decoder attends to, per wiring."""
    valid = lengths_to_mask(enc.enc_lens, enc.enc.shape[1])
    mems = [(enc.enc, valid)]
    if model.get_decoder(task).n_memories == 2:
        if enc.sub_enc is None:
            raise ContractError("decoder wired for two memories but only one cached")
        mems.append((enc.sub_enc, lengths_to_mask(enc.sub_enc_lens,
                                                  enc.sub_enc.shape[1])))
    return mems


def decode_utterance(model: Model, feats: np.ndarray, feat_len: int,
                     cfg: DecodeConfig,
                     tasks=("verbatim", "subtitle")) -> dict[str, BeamResult]:
    """Beam-decode one utterance for the requested tasks.

    The variant decides what a task means: the naive model emits a single
    stream and refuses the subtitle task; the task-token model conditions
    one decoder two ways; cascaded-decoder models run the verbatim pass
    first and feed its hidden states onward.
    """
    cfg.validate()
    v = model.config.variant
    for task in tasks:
        if task not in ("verbatim", "subtitle"):
            raise UnsupportedTaskError(f"unknown task {task!r}")
    if v is ModelVariant.NAIVE_E2E and "subtitle" in tasks:
        raise UnsupportedTaskError(
            "the naive variant produces one combined stream; decode its "
            "'verbatim' task instead"
        )

    feats = np.asarray(feats)
    if feats.ndim == 2:
        feats = feats[None]
    enc = model.encode_for_decoding(feats, np.array([feat_len]))
    t_frames = int(enc.enc_lens[0])
    max_len = max(cfg.min_len, int(round(cfg.max_len_ratio * t_frames)))
    results: dict[str, BeamResult] = {}

    def run(task: str, memories, prefix_frame, scorer, weight) -> BeamResult:
        step = _att_step_fn(model, task, memories, prefix_frame)
        return beam_search(step, model.config.vocab_size, max_len,
                           scorer, cfg, weight)

    if "verbatim" in tasks or v is ModelVariant.CASCADED_DECODER:
        prefix = ([TASK_IDS["verbatim"], SOS]
                  if v is ModelVariant.SHARED_TASK_DECODER else [SOS])
        scorer = CTCPrefixScorer(enc.ctc_logprobs[0, :t_frames])
        verb = run("verbatim", _memories_for(model, "verbatim", enc),
                   prefix, scorer, cfg.ctc_weight)
        if "verbatim" in tasks:
            results["verbatim"] = verb

    if "subtitle" in tasks and v is not ModelVariant.NAIVE_E2E:
        if v is ModelVariant.CASCADED_DECODER:
            fed = ([UNK] if cfg.cascade_feed == "unk"
                   else list(verb.best.tokens) or [UNK])
            ids = np.array([[SOS] + fed], dtype=np.int64)
            _, hidden = model.decoder_forward(
                "verbatim", ids, _memories_for(model, "verbatim", enc)
            )
            sub = model.sub_encode(hidden, np.array([ids.shape[1]]),
                                   ForwardCtx(train=False))
            memories = [(enc.enc, lengths_to_mask(enc.enc_lens, enc.enc.shape[1])),
                        (sub, np.ones((1, sub.shape[1]), dtype=bool))]
        else:
            memories = _memories_for(model, "subtitle", enc)
        prefix = ([TASK_IDS["subtitle"], SOS]
                  if v is ModelVariant.SHARED_TASK_DECODER else [SOS])
        scorer = None
        if cfg.subtitle_ctc_weight > 0.0:
            if not hasattr(model, "sub_ctc_head"):
                raise ConfigError(
                    "subtitle_ctc_weight > 0 needs a model with a subtitle CTC head"
                )
            logp = ad.log_softmax(model.sub_ctc_head(enc.sub_enc), axis=-1)
            scorer = CTCPrefixScorer(logp.data[0, :t_frames])
        results["subtitle"] = run("subtitle", memories, prefix, scorer,
                                  cfg.subtitle_ctc_weight)
    return results


def decode_corpus(model: Model, utterances, cfg: DecodeConfig,
                  tasks=("verbatim", "subtitle"), threads: int | None = None):
    """Decode (feats, feat_len) pairs concurrently over shared parameters.

    Results come back in input order whatever the completion order; the
    worker count falls back to the DUALSCRIBE_THREADS environment variable.
    """
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1"))
    if threads < 1:
        raise ConfigError(f"thread count {threads} must be >= 1")
    if threads == 1:
        return [decode_utterance(model, f, l, cfg, tasks) for f, l in utterances]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futs = [pool.submit(decode_utterance, model, f, l, cfg, tasks)
                for f, l in utterances]
        return [f.result() for f in futs]
