"""Training losses: CTC, label-smoothed cross-entropy, and their composition.

The loss surface mirrors the two-task training setup: a verbatim branch
(attention CE combined with final and intermediate CTC) and a subtitle
branch (attention CE, optionally mixed with a subtitle CTC).  Reductions are
fixed as: per-token mean inside each utterance, then mean over the counted
utterances of the task, and only then the task mixing weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_ZERO, Tensor
from .errors import ContractError, InfeasibleError, ShapeError


@dataclass
class LossWeights:
    """Mixing weights for the composite losses.

    ctc_weight mixes CTC against attention CE inside the verbatim branch;
    inter_ctc_share splits the CTC part between the final and the
    intermediate encoder tap; subtitle_ctc_share mixes a subtitle CTC into
    the subtitle branch when the architecture provides one.  The task
    weights combine the two per-task means into the total.
    """

    ctc_weight: float = 0.3             # within the verbatim branch
    inter_ctc_share: float = 0.3        # within the CTC part
    inter_ctc_layer: int = 6            # 1-based encoder layer of the tap
    subtitle_ctc_share: float = 0.0     # within the subtitle branch (off by default)
    verbatim_task_weight: float = 0.5
    subtitle_task_weight: float = 0.5
    smoothing: float = 0.1

    def validate(self) -> None:
        for name in ("ctc_weight", "inter_ctc_share", "subtitle_ctc_share",
                     "verbatim_task_weight", "subtitle_task_weight", "smoothing"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ContractError(f"loss weight {name}={v} outside [0, 1]")
        if self.inter_ctc_layer < 1:
            raise ContractError("inter_ctc_layer must be >= 1")


@dataclass
class TaskMask:
    """Which supervision each utterance in a batch carries."""

    has_verbatim: np.ndarray   # bool (B,)
    has_subtitle: np.ndarray   # bool (B,)

    def validate(self) -> None:
        both = self.has_verbatim | self.has_subtitle
        if not np.all(both):
            raise ContractError("every utterance needs at least one target")
        if not (self.has_verbatim.any() or self.has_subtitle.any()):
            raise ContractError("batch has neither verbatim nor subtitle targets")


# ---------------------------------------------------------------------------
# CTC


def _extended_labels(labels: list[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _min_frames(labels: list[int]) -> int:
    """Frames needed to emit the sequence: length plus forced blanks between repeats."""
    need = len(labels)
    for a, b in zip(labels, labels[1:]):
        if a == b:
            need += 1
    return need


def ctc_loss_batch(log_probs: Tensor, label_seqs: list[list[int]],
                   frame_lens: np.ndarray, blank: int = 0) -> Tensor:
    """Negative CTC log-likelihood per utterance, shape (B,).

    ``log_probs`` is (B, T, V) of per-frame log posteriors (rows already
    normalized); frames at t >= frame_lens[b] are ignored.  The forward
    lattice runs over the blank-extended label sequence with the standard
    transition rules (stay, advance one, skip a blank unless the labels
    repeat).  All lattice arithmetic uses the finite LOG_ZERO sentinel and
    is recorded on the tape, so the loss is differentiable.
    """
    if log_probs.ndim != 3:
        raise ShapeError(f"ctc: log_probs must be (B, T, V), got {log_probs.shape}")
    b, t_max, v = log_probs.shape
    if len(label_seqs) != b or len(frame_lens) != b:
        raise ShapeError(f"ctc: {b} utterances but {len(label_seqs)} label sequences")
    dtype = log_probs.dtype

    for i, (labels, t_u) in enumerate(zip(label_seqs, frame_lens)):
        if any(l == blank for l in labels):
            raise ContractError(f"ctc: utterance {i} labels contain the blank id")
        if any(not (0 <= l < v) for l in labels):
            raise ShapeError(f"ctc: utterance {i} label id outside vocabulary of {v}")
        if t_u < 1:
            raise ContractError(f"ctc: utterance {i} has no frames")
        if _min_frames(labels) > t_u:
            raise InfeasibleError(
                f"ctc: utterance {i} needs {_min_frames(labels)} frames for "
                f"{len(labels)} labels but only {t_u} are available"
            )

    s_max = max(2 * len(ls) + 1 for ls in label_seqs)
    ext = np.zeros((b, s_max), dtype=np.int64)
    skip_ok = np.full((b, s_max), LOG_ZERO)
    init = np.full((b, s_max), LOG_ZERO)
    for i, labels in enumerate(label_seqs):
        e = _extended_labels(labels, blank)
        ext[i, :len(e)] = e
        ext[i, len(e):] = blank
        for s in range(2, len(e)):
            if e[s] != blank and e[s] != e[s - 2]:
                skip_ok[i, s] = 0.0
        init[i, 0] = 0.0
        if len(e) > 1:
            init[i, 1] = 0.0

    def emit(t):
        frame = ad.reshape(ad.slice_axis(log_probs, 1, t, t + 1), (b, v))
        return ad.index_select_last(frame, ext)

    alpha = ad.add_const(emit(0), init)
    history = [alpha]
    zero1 = Tensor(np.full((b, 1), LOG_ZERO), dtype=dtype)
    zero2 = Tensor(np.full((b, 2), LOG_ZERO), dtype=dtype)
    for t in range(1, t_max):
        stay = alpha
        moves = [stay,
                 ad.concat([zero1, ad.slice_axis(alpha, 1, 0, s_max - 1)], axis=1)]
        if s_max >= 2:
            step2 = ad.concat([zero2, ad.slice_axis(alpha, 1, 0, s_max - 2)], axis=1)
            moves.append(ad.add_const(step2, skip_ok))
        trans = ad.logsumexp(ad.stack(moves, axis=0), axis=0)
        alpha = ad.add(trans, emit(t))
        history.append(alpha)

    # read out log P at each utterance's own final frame: the last two
    # lattice states (final label, trailing blank)
    readout = np.full((t_max, b, s_max), LOG_ZERO)
    for i, labels in enumerate(label_seqs):
        s_len = 2 * len(labels) + 1
        t_u = int(frame_lens[i])
        readout[t_u - 1, i, s_len - 1] = 0.0
        if s_len > 1:
            readout[t_u - 1, i, s_len - 2] = 0.0
    lattice = ad.add_const(ad.stack(history, axis=0), readout)
    loglik = ad.logsumexp(ad.transpose(lattice, (1, 0, 2)), axis=(1, 2))
    return ad.scale(loglik, -1.0)


def ctc_loss(log_probs: Tensor, labels: list[int], blank: int = 0) -> Tensor:
    """Scalar CTC loss for one utterance; ``log_probs`` is (T, V)."""
    if log_probs.ndim != 2:
        raise ShapeError(f"ctc: log_probs must be (T, V), got {log_probs.shape}")
    t, v = log_probs.shape
    batched = ad.reshape(log_probs, (1, t, v))
    vec = ctc_loss_batch(batched, [list(labels)], np.array([t]), blank)
    return ad.reshape(vec, ())


# ---------------------------------------------------------------------------
# label-smoothed cross-entropy


def smoothed_targets(targets: np.ndarray, vocab: int, smoothing: float) -> np.ndarray:
    """Distribution with 1 - s on the target and s / (V - 1) spread elsewhere."""
    q = np.full(targets.shape + (vocab,), smoothing / (vocab - 1))
    np.put_along_axis(q, targets[..., None], 1.0 - smoothing, axis=-1)
    return q


def weighted_smoothed_ce(logits: Tensor, targets: np.ndarray,
                         smoothing: float, weights: np.ndarray) -> Tensor:
    """Sum over positions of weight * CE(smoothed one-hot, softmax(logits)).

    ``weights`` carries both the position masking (zero to ignore) and the
    normalization, so callers control the reduction exactly.
    """
    if logits.shape[:-1] != targets.shape or targets.shape != weights.shape:
        raise ShapeError(
            f"smoothed ce: logits {logits.shape}, targets {targets.shape}, "
            f"weights {weights.shape}"
        )
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError(f"smoothed ce: target id outside vocabulary of {v}")
    logp = ad.log_softmax(logits, axis=-1)
    q = smoothed_targets(targets, v, smoothing) * weights[..., None]
    picked = ad.reduce_sum(ad.mul(logp, Tensor(q, dtype=logits.dtype)))
    return ad.scale(picked, -1.0)


def label_smoothed_ce(logits: Tensor, targets: np.ndarray, smoothing: float,
                      ignore: np.ndarray | None = None) -> Tensor:
    """Mean label-smoothed CE over the counted positions of one sequence.

    Per position the loss is
    ``-[(1 - s) * logp[target] + s / (V - 1) * sum over other logp]``.
    Positions where ``ignore`` is True do not contribute; ignoring every
    position is a contract error.
    """
    if logits.ndim != 2:
        raise ShapeError(f"smoothed ce: logits must be (L, V), got {logits.shape}")
    targets = np.asarray(targets)
    if ignore is None:
        ignore = np.zeros(targets.shape, dtype=bool)
    counted = int((~ignore).sum())
    if counted == 0:
        raise ContractError("smoothed ce: every position is ignored")
    weights = (~ignore).astype(float) / counted
    return weighted_smoothed_ce(logits, targets, smoothing, weights)


# ---------------------------------------------------------------------------
# composition


def asr_loss(att: Tensor, ctc_final: Tensor | None, ctc_inter: Tensor | None,
             w: LossWeights) -> Tensor:
    """Verbatim branch: (1 - a) * att + a * ((1 - b) * ctc + b * inter_ctc)."""
    a, b = w.ctc_weight, w.inter_ctc_share
    if a == 0.0:
        return att
    if ctc_final is None:
        raise ContractError("asr_loss: ctc_weight > 0 but no CTC loss given")
    if b == 0.0:
        ctc_part = ctc_final
    else:
        if ctc_inter is None:
            raise ContractError("asr_loss: inter_ctc_share > 0 but no intermediate CTC")
        ctc_part = ad.add(ad.scale(ctc_final, 1.0 - b), ad.scale(ctc_inter, b))
    return ad.add(ad.scale(att, 1.0 - a), ad.scale(ctc_part, a))


def subtitle_loss(att: Tensor, ctc_sub: Tensor | None, w: LossWeights) -> Tensor:
    """Subtitle branch: (1 - g) * att + g * subtitle CTC."""
    g = w.subtitle_ctc_share
    if g == 0.0:
        return att
    if ctc_sub is None:
        raise ContractError("subtitle_loss: subtitle_ctc_share > 0 but no subtitle CTC")
    return ad.add(ad.scale(att, 1.0 - g), ad.scale(ctc_sub, g))


def joint_loss(asr: Tensor | None, subs: Tensor | None, w: LossWeights) -> Tensor:
    """Total: w_verbatim * asr branch + w_subtitle * subtitle branch.

    A branch may be absent when the batch contains no utterance for that
    task; both absent is a contract error.
    """
    if asr is None and subs is None:
        raise ContractError("joint_loss: no loss component present")
    total = None
    if asr is not None:
        total = ad.scale(asr, w.verbatim_task_weight)
    if subs is not None:
        term = ad.scale(subs, w.subtitle_task_weight)
        total = term if total is None else ad.add(total, term)
    return total
