"""The six joint transcription/subtitling architectures.

Every variant shares a Conformer audio encoder with a CTC head and a
token embedding; they differ in how many decoders exist, whether a
subtitle encoder is stacked on top of the audio encoder or on the
verbatim decoder's hidden states, and which memories each decoder
cross-attends to:

    naive_e2e              one decoder, subtitles folded into verbatim data
    shared_task_decoder    one decoder, task token ahead of <sos>
    parallel_decoders      two decoders on the shared encoder
    cascaded_encoder       subtitle encoder over audio-encoder states;
                           subtitle decoder attends to both encoders
    cascaded_decoder       subtitle encoder over verbatim-decoder hidden
                           states; subtitle decoder attends to audio
                           encoder and that cascade
    cascaded_encoder_dual  cascaded_encoder, and the verbatim decoder
                           also attends to both encoders

Losses: the verbatim branch mixes attention CE with CTC (plus an
intermediate-layer CTC tap sharing the final projection); the subtitle
branch is attention CE with an optional CTC over subtitle-encoder
states; task branches are averaged per utterance and combined with the
task weights.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, sinusoid_positions
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .layers import (
    ConformerLayer,
    ForwardCtx,
    LayerNorm,
    Linear,
    Module,
    MultiTransformerDecoderLayer,
    Subsample,
    TransformerDecoderLayer,
    TransformerEncoderLayer,
    causal_mask,
    cross_attention_mask,
)
from .losses import (
    LossWeights,
    asr_loss,
    ctc_loss_batch,
    joint_loss,
    subtitle_loss,
    weighted_smoothed_ce,
)
from .textproc import BLANK, EOS, SOS, TASK_IDS, UNK


class ModelVariant(str, Enum):
    NAIVE_E2E = "naive_e2e"
    SHARED_TASK_DECODER = "shared_task_decoder"
    PARALLEL_DECODERS = "parallel_decoders"
    CASCADED_ENCODER = "cascaded_encoder"
    CASCADED_DECODER = "cascaded_decoder"
    CASCADED_ENCODER_DUAL = "cascaded_encoder_dual"


# variants with a subtitle encoder module
_CASCADED = {
    ModelVariant.CASCADED_ENCODER,
    ModelVariant.CASCADED_DECODER,
    ModelVariant.CASCADED_ENCODER_DUAL,
}
# variants with a dedicated subtitle decoder
_TWO_DECODERS = _CASCADED | {ModelVariant.PARALLEL_DECODERS}


@dataclass
class ModelConfig:
    variant: ModelVariant
    vocab_size: int
    feat_dim: int = 83
    d_model: int = 256
    n_heads: int = 4
    ff_dim: int = 2048
    enc_layers: int = 12
    dec_layers: int = 6
    sub_enc_layers: int = 2
    conv_kernel: int = 31
    dropout: float = 0.1
    max_rel: int = 64
    loss: LossWeights = field(default_factory=LossWeights)
    dtype: str = "f32"

    def validate(self) -> None:
        self.variant = ModelVariant(self.variant)
        if min(self.vocab_size, self.feat_dim, self.d_model, self.n_heads,
               self.ff_dim, self.enc_layers, self.dec_layers,
               self.conv_kernel, self.max_rel) < 1:
            raise ConfigError("model dims must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads"
            )
        needed = max(BLANK, UNK, SOS, EOS)
        if self.variant is ModelVariant.SHARED_TASK_DECODER:
            needed = max(needed, *TASK_IDS.values())
        if self.vocab_size <= needed:
            raise ConfigError(
                f"vocab_size {self.vocab_size} misses required special ids"
            )
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        self.loss.validate()
        if self.loss.inter_ctc_share > 0.0 and self.loss.inter_ctc_layer > self.enc_layers:
            raise ConfigError(
                f"intermediate CTC tap at layer {self.loss.inter_ctc_layer} "
                f"but encoder has {self.enc_layers}"
            )
        if self.variant in _CASCADED and self.sub_enc_layers < 1:
            raise ConfigError("cascaded variants need sub_enc_layers >= 1")
        if self.loss.subtitle_ctc_share > 0.0 and self.variant not in (
            ModelVariant.CASCADED_ENCODER, ModelVariant.CASCADED_ENCODER_DUAL
        ):
            raise ConfigError(
                "subtitle CTC exists only for the cascaded-encoder variants"
            )

    @classmethod
    def desk(cls, variant, vocab_size, **overrides) -> "ModelConfig":
        """Tiny dims for tests and quick experiments."""
        base = dict(
            feat_dim=83, d_model=32, n_heads=2, ff_dim=64, enc_layers=2,
            dec_layers=1, sub_enc_layers=1, conv_kernel=7, dropout=0.0,
            max_rel=16, loss=LossWeights(inter_ctc_layer=1),
        )
        base.update(overrides)
        return cls(variant=ModelVariant(variant), vocab_size=vocab_size, **base)

    @classmethod
    def xl(cls, variant, vocab_size, **overrides) -> "ModelConfig":
        """Wide setting: doubled model dimension and head count."""
        base = dict(d_model=512, n_heads=8)
        base.update(overrides)
        return cls(variant=ModelVariant(variant), vocab_size=vocab_size, **base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["loss"] = LossWeights(**d.get("loss", {}))
        d["variant"] = ModelVariant(d["variant"])
        return cls(**d)


@dataclass
class Batch:
    """One training batch.

    ``verbatim``/``subtitle`` hold token-id target sequences (no sos/eos/task
    framing, no blank) or None where an utterance lacks that supervision.
    """

    feats: np.ndarray          # (B, T, F) float
    feat_lens: np.ndarray      # (B,) int
    verbatim: list[list[int] | None]
    subtitle: list[list[int] | None]

    def validate(self) -> None:
        if self.feats.ndim != 3:
            raise ShapeError(f"batch feats must be (B, T, F), got {self.feats.shape}")
        b = self.feats.shape[0]
        if not (len(self.feat_lens) == len(self.verbatim) == len(self.subtitle) == b):
            raise ShapeError("batch fields disagree on utterance count")
        for i in range(b):
            if self.verbatim[i] is None and self.subtitle[i] is None:
                raise ContractError(f"utterance {i} carries no target at all")


@dataclass
class ForwardOutputs:
    """States and logits a training forward produced; absent fields mean the
    variant does not define them."""

    enc: Tensor
    enc_lens: np.ndarray
    sub_enc: Tensor | None = None
    sub_enc_lens: np.ndarray | None = None
    verbatim_rows: list[int] | None = None
    subtitle_rows: list[int] | None = None
    verbatim_logits: Tensor | None = None
    subtitle_logits: Tensor | None = None
    ctc_logprobs: Tensor | None = None
    inter_ctc_logprobs: Tensor | None = None
    subtitle_ctc_logprobs: Tensor | None = None


@dataclass
class LossOutputs:
    total: Tensor                 # scalar, on the tape
    parts: dict[str, float]       # detached component values
    token_counts: dict[str, int]  # CE positions entering each task's mean
    correct: dict[str, int]       # teacher-forced argmax hits on those
    outputs: ForwardOutputs


@dataclass
class EncodedUtterances:
    """Cached encoder work for decoding."""

    enc: Tensor
    enc_lens: np.ndarray
    sub_enc: Tensor | None = None
    sub_enc_lens: np.ndarray | None = None
    ctc_logprobs: np.ndarray | None = None   # (B, T', V)


def lengths_to_mask(lens: np.ndarray, t: int) -> np.ndarray:
    return np.arange(t)[None, :] < np.asarray(lens)[:, None]


def gather_rows(x: Tensor, rows) -> Tensor:
    return ad.embedding_lookup(x, np.asarray(rows, dtype=np.int64))


class TokenFrontend(Module):
    """Shared input embedding: lookup, sqrt(d) scale, sinusoid positions."""

    def __init__(self, vocab: int, d_model: int, rng, dtype="f32"):
        super().__init__()
        dt = ad.resolve_dtype(dtype)
        self.table = Tensor(
            rng.uniform(-1.0, 1.0, (vocab, d_model)) / math.sqrt(d_model),
            requires_grad=True, dtype=dt,
        )
        object.__setattr__(self, "d_model", d_model)

    def __call__(self, ids: np.ndarray, ctx: ForwardCtx) -> Tensor:
        e = ad.embedding_lookup(self.table, np.asarray(ids, dtype=np.int64))
        e = ad.scale(e, math.sqrt(self.d_model))
        pe = sinusoid_positions(ids.shape[-1], self.d_model, e.data.dtype)
        return ctx.drop(ad.add_const(e, pe))


class TransformerDecoder(Module):
    """Decoder stack with a final norm and its own output projection.

    ``n_memories`` selects plain cross-attention (1) or the two-source
    Multi-Transformer layer (2).
    """

    def __init__(self, d_model, n_heads, ff_dim, n_layers, vocab, rng,
                 dtype="f32", n_memories: int = 1):
        super().__init__()
        if n_memories == 1:
            mk = lambda: TransformerDecoderLayer(d_model, n_heads, ff_dim, rng, dtype)
        elif n_memories == 2:
            mk = lambda: MultiTransformerDecoderLayer(d_model, n_heads, ff_dim, rng, dtype)
        else:
            raise ConfigError(f"decoder supports 1 or 2 memories, not {n_memories}")
        self.layers = [mk() for _ in range(n_layers)]
        self.norm = LayerNorm(d_model, dtype)
        self.out = Linear(d_model, vocab, rng, dtype)
        object.__setattr__(self, "n_memories", n_memories)

    def __call__(self, emb: Tensor, self_mask: np.ndarray, memories,
                 ctx: ForwardCtx):
        if len(memories) != self.n_memories:
            raise ContractError(
                f"decoder wired for {self.n_memories} memories, got {len(memories)}"
            )
        h = emb
        for layer in self.layers:
            h = layer(h, memories, self_mask, ctx)
        h = self.norm(h)
        return self.out(h), h


@dataclass
class _Packed:
    in_ids: np.ndarray       # (B, L) decoder inputs
    targets: np.ndarray      # (B, L) next-token targets
    weights: np.ndarray      # (B, L) CE weights; zero rows are hidden-only
    key_valid: np.ndarray    # (B, L) real (non-pad) input positions
    in_lens: np.ndarray      # (B,)
    counted: int             # positions with weight > 0


def _pack_targets(seqs: list[list[int] | None], task_id: int | None) -> _Packed:
    """Lay out decoder inputs/targets.  A None sequence becomes the dummy
    [<sos>, <unk>] input whose CE weight is zero (hidden states only)."""
    prefix = [] if task_id is None else [task_id]
    ins, tgts, ns = [], [], []
    for y in seqs:
        if y is None:
            ins.append(prefix + [SOS, UNK])
            tgts.append([UNK, EOS] if task_id is None else [SOS, UNK, EOS])
            ns.append(0)
        else:
            ins.append(prefix + [SOS] + list(y))
            tgts.append([SOS] * len(prefix) + list(y) + [EOS])
            ns.append(len(y) + 1)
    b = len(ins)
    lmax = max(len(s) for s in ins)
    in_ids = np.full((b, lmax), EOS, dtype=np.int64)
    targets = np.full((b, lmax), EOS, dtype=np.int64)
    weights = np.zeros((b, lmax))
    key_valid = np.zeros((b, lmax), dtype=bool)
    u = sum(1 for n in ns if n > 0)
    for i, (s, t, n) in enumerate(zip(ins, tgts, ns)):
        in_ids[i, :len(s)] = s
        targets[i, :len(t)] = t
        key_valid[i, :len(s)] = True
        if n > 0:
            # the position that would predict <sos> from a task prefix is
            # deterministic and excluded from the mean
            weights[i, len(prefix):len(prefix) + n] = 1.0 / (n * u)
    return _Packed(in_ids, targets, weights, key_valid,
                   key_valid.sum(axis=1), int((np.array(ns) > 0).sum()))


class Model(Module):
    """One of the six variants, built deterministically from (config, seed)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        object.__setattr__(self, "config", config)
        c = config
        rng = np.random.default_rng(seed)
        dt = c.dtype
        self.frontend = Subsample(c.feat_dim, c.d_model, rng, dt)
        self.encoder = [
            ConformerLayer(c.d_model, c.n_heads, c.ff_dim, c.conv_kernel,
                           rng, dt, max_rel=c.max_rel)
            for _ in range(c.enc_layers)
        ]
        self.ctc_head = Linear(c.d_model, c.vocab_size, rng, dt)
        self.embed = TokenFrontend(c.vocab_size, c.d_model, rng, dt)

        def decoder(n_memories):
            return TransformerDecoder(c.d_model, c.n_heads, c.ff_dim,
                                      c.dec_layers, c.vocab_size, rng, dt,
                                      n_memories=n_memories)

        v = c.variant
        if v in (ModelVariant.NAIVE_E2E, ModelVariant.SHARED_TASK_DECODER):
            self.decoder = decoder(1)
        else:
            self.dec_verbatim = decoder(
                2 if v is ModelVariant.CASCADED_ENCODER_DUAL else 1
            )
            if v in _CASCADED:
                self.sub_encoder = [
                    TransformerEncoderLayer(c.d_model, c.n_heads, c.ff_dim, rng, dt)
                    for _ in range(c.sub_enc_layers)
                ]
            self.dec_subtitle = decoder(1 if v is ModelVariant.PARALLEL_DECODERS else 2)
            if c.loss.subtitle_ctc_share > 0.0:
                self.sub_ctc_head = Linear(c.d_model, c.vocab_size, rng, dt)

    # -- encoders ----------------------------------------------------------

    def encode(self, feats: np.ndarray, feat_lens: np.ndarray, ctx: ForwardCtx):
        """Subsampled Conformer pass; also returns the intermediate tap
        states when the loss asks for them."""
        x = Tensor(np.asarray(feats), dtype=ad.resolve_dtype(self.config.dtype))
        h, out_lens = self.frontend(x, np.asarray(feat_lens))
        h = ctx.drop(h)
        valid = lengths_to_mask(out_lens, h.shape[1])
        w = self.config.loss
        want_inter = ctx.train and w.ctc_weight > 0.0 and w.inter_ctc_share > 0.0
        inter = None
        for i, layer in enumerate(self.encoder, start=1):
            h = layer(h, valid, ctx)
            if want_inter and i == w.inter_ctc_layer:
                inter = h
        return h, out_lens, inter

    def sub_encode(self, mem: Tensor, lens: np.ndarray, ctx: ForwardCtx) -> Tensor:
        if self.config.variant not in _CASCADED:
            raise ContractError(f"{self.config.variant.value} has no subtitle encoder")
        valid = lengths_to_mask(lens, mem.shape[1])
        h = mem
        for layer in self.sub_encoder:
            h = layer(h, valid, ctx)
        return h

    def encoder_states(self, feats: np.ndarray, feat_lens: np.ndarray):
        """Deterministic eval-mode encoder (and cascaded subtitle-encoder)
        states, for inspection and decoding."""
        if np.asarray(feats).shape[1] == 0:
            raise ContractError("encoder_states: empty input")
        ctx = ForwardCtx(train=False)
        enc, enc_lens, _ = self.encode(feats, feat_lens, ctx)
        sub = None
        if self.config.variant in (ModelVariant.CASCADED_ENCODER,
                                   ModelVariant.CASCADED_ENCODER_DUAL):
            sub = self.sub_encode(enc, enc_lens, ctx)
        return enc, enc_lens, sub

    # -- decoder plumbing --------------------------------------------------

    def get_decoder(self, task: str) -> TransformerDecoder:
        if task not in ("verbatim", "subtitle"):
            raise ContractError(f"unknown task {task!r}")
        if hasattr(self, "decoder"):
            return self.decoder
        return self.dec_verbatim if task == "verbatim" else self.dec_subtitle

    def decoder_forward(self, task: str, ids: np.ndarray, memories,
                        ctx: ForwardCtx | None = None,
                        self_key_valid: np.ndarray | None = None):
        """Run a decoder on (B, L) token inputs.

        ``memories`` is a list of (states, valid_mask) pairs matching the
        decoder's wiring.  Returns (logits, final hidden states).
        """
        ctx = ctx or ForwardCtx(train=False)
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeError(f"decoder ids must be (B, L), got {ids.shape}")
        b, l = ids.shape
        mask = causal_mask(l)
        if self_key_valid is not None:
            mask = mask[None, :, :] & self_key_valid[:, None, :]
        wired = [(mem, cross_attention_mask(valid, l)) for mem, valid in memories]
        emb = self.embed(ids, ctx)
        return self.get_decoder(task)(emb, mask, wired, ctx)

    # -- loss helpers ------------------------------------------------------

    def _ctc_term(self, states: Tensor, head: Linear, rows, labels,
                  frame_lens: np.ndarray):
        """Per-token, per-utterance averaged CTC over a row subset."""
        sub = gather_rows(states, rows)
        logp = ad.log_softmax(head(sub), axis=-1)
        nll = ctc_loss_batch(logp, labels, frame_lens, blank=BLANK)
        w = np.array([1.0 / max(1, len(y)) for y in labels]) / len(labels)
        return ad.reduce_sum(ad.mul(nll, Tensor(w, dtype=nll.dtype))), logp

    def _att_ce(self, task: str, pack: _Packed, memories, ctx: ForwardCtx):
        """Teacher-forced CE for a packed target set; also reports argmax
        agreement on the weighted positions."""
        logits, hidden = self.decoder_forward(
            task, pack.in_ids, memories, ctx, self_key_valid=pack.key_valid
        )
        ce = None
        if pack.counted:
            ce = weighted_smoothed_ce(logits, pack.targets,
                                      self.config.loss.smoothing, pack.weights)
        hits = int(((logits.data.argmax(-1) == pack.targets)
                    & (pack.weights > 0)).sum())
        return ce, logits, hidden, hits

    # -- training forward --------------------------------------------------

    def forward_train(self, batch: Batch, ctx: ForwardCtx) -> LossOutputs:
        batch.validate()
        v = self.config.variant
        w = self.config.loss
        b = batch.feats.shape[0]
        if v is ModelVariant.NAIVE_E2E:
            bad = [i for i, s in enumerate(batch.subtitle) if s is not None]
            if bad:
                raise ContractError(
                    "naive variant trains on one merged target stream; fold "
                    f"subtitles into the verbatim slot upstream (rows {bad})"
                )
            v_rows = list(range(b))
            s_rows: list[int] = []
        else:
            v_rows = [i for i in range(b) if batch.verbatim[i] is not None]
            s_rows = [i for i in range(b) if batch.subtitle[i] is not None]

        enc, enc_lens, inter = self.encode(batch.feats, batch.feat_lens, ctx)
        enc_valid = lengths_to_mask(enc_lens, enc.shape[1])
        out = ForwardOutputs(enc=enc, enc_lens=enc_lens,
                             verbatim_rows=v_rows, subtitle_rows=s_rows)
        parts: dict[str, float] = {}
        counts = {"verbatim": 0, "subtitle": 0}
        correct = {"verbatim": 0, "subtitle": 0}

        ctc_t = inter_t = None
        if v_rows and w.ctc_weight > 0.0:
            labels = [list(batch.verbatim[i]) for i in v_rows]
            ctc_t, out.ctc_logprobs = self._ctc_term(
                enc, self.ctc_head, v_rows, labels, enc_lens[v_rows]
            )
            parts["asr_ctc"] = ctc_t.item()
            if inter is not None:
                inter_t, out.inter_ctc_logprobs = self._ctc_term(
                    inter, self.ctc_head, v_rows, labels, enc_lens[v_rows]
                )
                parts["asr_inter_ctc"] = inter_t.item()

        def mem(rows):
            return (gather_rows(enc, rows), enc_valid[rows])

        asr = subs = None

        if v in (ModelVariant.NAIVE_E2E, ModelVariant.SHARED_TASK_DECODER):
            task_id = None if v is ModelVariant.NAIVE_E2E else TASK_IDS["verbatim"]
            if v_rows:
                pack = _pack_targets([batch.verbatim[i] for i in v_rows], task_id)
                ce, out.verbatim_logits, _, hits = self._att_ce(
                    "verbatim", pack, [mem(v_rows)], ctx
                )
                counts["verbatim"] = int((pack.weights > 0).sum())
                correct["verbatim"] = hits
                parts["asr_att"] = ce.item()
                asr = asr_loss(ce, ctc_t, inter_t, w)
            if v is ModelVariant.SHARED_TASK_DECODER and s_rows:
                pack = _pack_targets([batch.subtitle[i] for i in s_rows],
                                     TASK_IDS["subtitle"])
                ce, out.subtitle_logits, _, hits = self._att_ce(
                    "subtitle", pack, [mem(s_rows)], ctx
                )
                counts["subtitle"] = int((pack.weights > 0).sum())
                correct["subtitle"] = hits
                parts["subs_att"] = ce.item()
                subs = subtitle_loss(ce, None, w)
            total = asr if v is ModelVariant.NAIVE_E2E else joint_loss(asr, subs, w)

        elif v is ModelVariant.PARALLEL_DECODERS:
            if v_rows:
                pack = _pack_targets([batch.verbatim[i] for i in v_rows], None)
                ce, out.verbatim_logits, _, hits = self._att_ce(
                    "verbatim", pack, [mem(v_rows)], ctx
                )
                counts["verbatim"] = int((pack.weights > 0).sum())
                correct["verbatim"] = hits
                parts["asr_att"] = ce.item()
                asr = asr_loss(ce, ctc_t, inter_t, w)
            if s_rows:
                pack = _pack_targets([batch.subtitle[i] for i in s_rows], None)
                ce, out.subtitle_logits, _, hits = self._att_ce(
                    "subtitle", pack, [mem(s_rows)], ctx
                )
                counts["subtitle"] = int((pack.weights > 0).sum())
                correct["subtitle"] = hits
                parts["subs_att"] = ce.item()
                subs = subtitle_loss(ce, None, w)
            total = joint_loss(asr, subs, w)

        elif v in (ModelVariant.CASCADED_ENCODER, ModelVariant.CASCADED_ENCODER_DUAL):
            sub_states = self.sub_encode(enc, enc_lens, ctx)
            out.sub_enc, out.sub_enc_lens = sub_states, enc_lens
            if v_rows:
                pack = _pack_targets([batch.verbatim[i] for i in v_rows], None)
                memories = [mem(v_rows)]
                if v is ModelVariant.CASCADED_ENCODER_DUAL:
                    memories.append((gather_rows(sub_states, v_rows), enc_valid[v_rows]))
                ce, out.verbatim_logits, _, hits = self._att_ce(
                    "verbatim", pack, memories, ctx
                )
                counts["verbatim"] = int((pack.weights > 0).sum())
                correct["verbatim"] = hits
                parts["asr_att"] = ce.item()
                asr = asr_loss(ce, ctc_t, inter_t, w)
            if s_rows:
                pack = _pack_targets([batch.subtitle[i] for i in s_rows], None)
                memories = [mem(s_rows),
                            (gather_rows(sub_states, s_rows), enc_valid[s_rows])]
                ce, out.subtitle_logits, _, hits = self._att_ce(
                    "subtitle", pack, memories, ctx
                )
                counts["subtitle"] = int((pack.weights > 0).sum())
                correct["subtitle"] = hits
                parts["subs_att"] = ce.item()
                ctc_s = None
                if w.subtitle_ctc_share > 0.0:
                    slabels = [list(batch.subtitle[i]) for i in s_rows]
                    ctc_s, out.subtitle_ctc_logprobs = self._ctc_term(
                        sub_states, self.sub_ctc_head, s_rows, slabels,
                        enc_lens[s_rows],
                    )
                    parts["subs_ctc"] = ctc_s.item()
                subs = subtitle_loss(ce, ctc_s, w)
            total = joint_loss(asr, subs, w)

        elif v is ModelVariant.CASCADED_DECODER:
            # every utterance passes the verbatim decoder; rows without a
            # verbatim target run on the dummy input and only contribute
            # hidden states
            pack = _pack_targets(list(batch.verbatim), None)
            ce, out.verbatim_logits, hidden, hits = self._att_ce(
                "verbatim", pack, [(enc, enc_valid)], ctx
            )
            counts["verbatim"] = int((pack.weights > 0).sum())
            correct["verbatim"] = hits
            if ce is not None:
                parts["asr_att"] = ce.item()
                asr = asr_loss(ce, ctc_t, inter_t, w)
            sub_states = self.sub_encode(
                hidden, pack.in_lens, ctx
            )
            out.sub_enc, out.sub_enc_lens = sub_states, pack.in_lens
            if s_rows:
                spack = _pack_targets([batch.subtitle[i] for i in s_rows], None)
                hidden_valid = lengths_to_mask(pack.in_lens, sub_states.shape[1])
                memories = [mem(s_rows),
                            (gather_rows(sub_states, s_rows), hidden_valid[s_rows])]
                ce_s, out.subtitle_logits, _, hits = self._att_ce(
                    "subtitle", spack, memories, ctx
                )
                counts["subtitle"] = int((spack.weights > 0).sum())
                correct["subtitle"] = hits
                parts["subs_att"] = ce_s.item()
                subs = subtitle_loss(ce_s, None, w)
            total = joint_loss(asr, subs, w)

        else:  # pragma: no cover - enum is closed
            raise ContractError(f"unhandled variant {v}")

        parts["total"] = total.item()
        return LossOutputs(total=total, parts=parts, token_counts=counts,
                           correct=correct, outputs=out)

    # -- decoding prep -----------------------------------------------------

    def encode_for_decoding(self, feats: np.ndarray,
                            feat_lens: np.ndarray) -> EncodedUtterances:
        ctx = ForwardCtx(train=False)
        enc, enc_lens, _ = self.encode(feats, feat_lens, ctx)
        sub = sub_lens = None
        if self.config.variant in (ModelVariant.CASCADED_ENCODER,
                                   ModelVariant.CASCADED_ENCODER_DUAL):
            sub = self.sub_encode(enc, enc_lens, ctx)
            sub_lens = enc_lens
        ctc = ad.log_softmax(self.ctc_head(enc), axis=-1).data
        return EncodedUtterances(enc=enc, enc_lens=enc_lens, sub_enc=sub,
                                 sub_enc_lens=sub_lens, ctc_logprobs=ctc)

    # -- persistence -------------------------------------------------------

    MAGIC = b"DSCK0001"

    def save_checkpoint(self, path: str, step: int = 0, vocab_hash: str = "",
                        extra: dict | None = None) -> None:
        """Binary checkpoint: magic, u32 header length, JSON header, then the
        parameter arrays as raw little-endian f32 in manifest order."""
        arrays = list(self.named_params())
        header = {
            "config": self.config.to_dict(),
            "step": int(step),
            "vocab_hash": vocab_hash,
            "extra": extra or {},
            "arrays": [[name, list(p.shape)] for name, p in arrays],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(self.MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for _, p in arrays:
                f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())

    @classmethod
    def load_checkpoint(cls, path: str) -> tuple["Model", dict]:
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:8] != cls.MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        if len(raw) < 12:
            raise FormatError(f"{path}: truncated header")
        (hlen,) = struct.unpack("<I", raw[8:12])
        try:
            header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: unreadable checkpoint header: {e}") from None
        model = cls(ModelConfig.from_dict(header["config"]))
        params = dict(model.named_params())
        manifest = header["arrays"]
        if [m[0] for m in manifest] != list(params):
            raise FormatError(f"{path}: parameter manifest does not match model")
        pos = 12 + hlen
        for name, shape in manifest:
            p = params[name]
            if tuple(shape) != p.shape:
                raise FormatError(
                    f"{path}: array {name} has shape {shape}, model wants {p.shape}"
                )
            nbytes = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
            chunk = raw[pos:pos + nbytes]
            if len(chunk) != nbytes:
                raise FormatError(f"{path}: truncated array {name}")
            arr = np.frombuffer(chunk, dtype="<f4").reshape(shape)
            p.data = arr.astype(p.data.dtype)
            pos += nbytes
        if pos != len(raw):
            raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
        meta = {k: header[k] for k in ("step", "vocab_hash", "extra")}
        return model, meta
