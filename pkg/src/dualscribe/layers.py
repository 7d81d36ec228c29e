"""Neural building blocks: attention, Conformer, Transformer decoders, frontend.

All layers are written against the tensor library in :mod:`dualscribe.autodiff`
and follow pre-norm residual composition.  Conventions:

* activations are (B, T, d_model); boolean pad masks are (B, T) with True at
  valid frames;
* attention masks are boolean allow-masks with True where a query may attend;
  a fully masked query row is a contract error;
* dropout is applied through precomputed masks drawn from the rng carried in
  a :class:`ForwardCtx`, so a seeded forward pass is exactly reproducible.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, LengthError, ShapeError

MASK_FILL = -1.0e30


class ForwardCtx:
    """Per-call state for a forward pass: train flag, dropout rate, rng."""

    def __init__(self, train: bool = False, dropout: float = 0.0, rng=None):
        if train and dropout > 0.0 and rng is None:
            raise ContractError("training forward with dropout needs an rng")
        self.train = train
        self.dropout = float(dropout)
        self.rng = rng

    def drop(self, x: Tensor) -> Tensor:
        if not self.train or self.dropout <= 0.0:
            return x
        keep = 1.0 - self.dropout
        mask = (self.rng.random(x.shape) < keep).astype(x.data.dtype) / keep
        return ad.dropout_mask_apply(x, mask)


class Module:
    """Minimal parameter container with ordered, prefixed parameter names."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(
            isinstance(v, Module) for v in value
        ):
            for i, v in enumerate(value):
                self._children[f"{name}{i}"] = v
        object.__setattr__(self, name, value)

    def named_params(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name if prefix else name), p
        for name, child in self._children.items():
            sub = f"{prefix}{name}." if prefix else f"{name}."
            yield from child.named_params(sub)

    def num_params(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def zero_grads(self) -> None:
        for _, p in self.named_params():
            p.grad = None


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return Tensor((rng.random(shape) * 2.0 - 1.0) * bound,
                  requires_grad=True, dtype=dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype="f32", bias: bool = True):
        super().__init__()
        self.w = _uniform(rng, (d_in, d_out), d_in, dtype)
        if bias:
            self.b = _uniform(rng, (d_out,), d_in, dtype)
        else:
            object.__setattr__(self, "b", None)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.pointwise_conv1d(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d: int, dtype="f32", eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(d), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)
        object.__setattr__(self, "eps", eps)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    h = ad.reshape(x, (b, t, n_heads, d // n_heads))
    return ad.transpose(h, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with optional relative positions.

    In relative mode the attention logit between query position i and key
    position j gains a term that depends only on the clipped offset i - j,
    realised with a learned per-offset embedding table plus the usual global
    content and position bias vectors.  Scores are therefore invariant to
    translating all positions by a constant.
    """

    def __init__(self, d_model: int, n_heads: int, rng, dtype="f32",
                 relative: bool = False, max_rel: int = 64):
        super().__init__()
        if d_model % n_heads != 0:
            raise ContractError(f"d_model {d_model} not divisible by {n_heads} heads")
        object.__setattr__(self, "d_model", d_model)
        object.__setattr__(self, "n_heads", n_heads)
        object.__setattr__(self, "d_head", d_model // n_heads)
        object.__setattr__(self, "relative", relative)
        object.__setattr__(self, "max_rel", max_rel)
        self.wq = Linear(d_model, d_model, rng, dtype)
        # no key bias: softmax is invariant to a per-query constant shift,
        # so a key bias would be a dead parameter
        self.wk = Linear(d_model, d_model, rng, dtype, bias=False)
        self.wv = Linear(d_model, d_model, rng, dtype)
        self.wo = Linear(d_model, d_model, rng, dtype)
        if relative:
            self.rel_table = _uniform(rng, (2 * max_rel + 1, d_model), d_model, dtype)
            self.u_bias = _uniform(rng, (n_heads, self.d_head), self.d_head, dtype)
            self.v_bias = _uniform(rng, (n_heads, self.d_head), self.d_head, dtype)

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: np.ndarray,
                 ctx: ForwardCtx, positions: np.ndarray | None = None) -> Tensor:
        b, tq, _ = q_in.shape
        tk = kv_in.shape[1]
        mask = np.asarray(mask)
        if mask.dtype != np.bool_:
            raise ContractError("attention mask must be boolean (True = may attend)")
        if mask.ndim == 2:
            mask4 = mask[None, None, :, :]
        elif mask.ndim == 3:
            mask4 = mask[:, None, :, :]
        else:
            raise ShapeError(f"attention mask rank {mask.ndim}, expected 2 or 3")
        if mask4.shape[-2:] != (tq, tk):
            raise ShapeError(
                f"attention mask trailing dims {mask4.shape[-2:]} vs (Tq={tq}, Tk={tk})"
            )
        if not np.all(mask4.any(axis=-1)):
            raise ContractError("attention: some query row has no allowed key")

        qh = _split_heads(self.wq(q_in), self.n_heads)
        kh = _split_heads(self.wk(kv_in), self.n_heads)
        vh = _split_heads(self.wv(kv_in), self.n_heads)
        kt = ad.transpose(kh, (0, 1, 3, 2))

        if self.relative:
            if tq != tk:
                raise ContractError("relative attention expects self-attention (Tq == Tk)")
            if positions is None:
                positions = np.arange(tq)
            u = ad.reshape(self.u_bias, (1, self.n_heads, 1, self.d_head))
            v = ad.reshape(self.v_bias, (1, self.n_heads, 1, self.d_head))
            ac = ad.matmul(ad.add(qh, u), kt)
            r = self.rel_table.shape[0]
            rel_k = ad.transpose(
                ad.reshape(self.rel_table, (r, self.n_heads, self.d_head)), (1, 2, 0)
            )
            rel_k = ad.reshape(rel_k, (1, self.n_heads, self.d_head, r))
            bd_full = ad.matmul(ad.add(qh, v), rel_k)
            offs = positions[:, None] - positions[None, :]
            idx = np.clip(offs, -self.max_rel, self.max_rel) + self.max_rel
            bd = ad.index_select_last(bd_full, idx.astype(np.int64))
            logits = ad.scale(ad.add(ac, bd), 1.0 / math.sqrt(self.d_head))
        else:
            logits = ad.scale(ad.matmul(qh, kt), 1.0 / math.sqrt(self.d_head))

        logits = ad.masked_fill(logits, ~np.broadcast_to(mask4, logits.shape), MASK_FILL)
        attn = ctx.drop(ad.softmax(logits, axis=-1))
        out = _merge_heads(ad.matmul(attn, vh))
        return self.wo(out)


class FeedForward(Module):
    """Two-layer position-wise net; activation is Swish by default."""

    def __init__(self, d_model: int, d_ff: int, rng, dtype="f32", activation="swish"):
        super().__init__()
        self.lin1 = Linear(d_model, d_ff, rng, dtype)
        self.lin2 = Linear(d_ff, d_model, rng, dtype)
        object.__setattr__(self, "act", ad.swish if activation == "swish" else ad.relu)

    def __call__(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        return self.lin2(ctx.drop(self.act(self.lin1(x))))


def pad_attention_mask(valid: np.ndarray) -> np.ndarray:
    """(B, T) validity -> (B, T, T) allow-mask restricting keys to valid frames."""
    b, t = valid.shape
    return np.broadcast_to(valid[:, None, :], (b, t, t)).copy()


def cross_attention_mask(valid_mem: np.ndarray, tq: int) -> np.ndarray:
    """(B, Tk) memory validity -> (B, Tq, Tk) allow-mask."""
    b, tk = valid_mem.shape
    return np.broadcast_to(valid_mem[:, None, :], (b, tq, tk)).copy()


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


class ConformerLayer(Module):
    """Macaron Conformer block: 1/2 FF, rel-MHSA, conv module, 1/2 FF, norm.

    The convolution module is LN -> pointwise (2d) -> GLU -> depthwise ->
    LN -> Swish -> pointwise -> dropout.  Layer normalization is used inside
    the conv module instead of a batch statistic so that utterances in a
    batch never influence each other.  Padded frames are zeroed before the
    depthwise convolution and again at the layer output, so padding cannot
    leak into valid frames.
    """

    def __init__(self, d_model: int, n_heads: int, d_ff: int, kernel: int,
                 rng, dtype="f32", max_rel: int = 64):
        super().__init__()
        if kernel % 2 != 1:
            raise ContractError(f"conv kernel {kernel} must be odd")
        self.ln_ff1 = LayerNorm(d_model, dtype)
        self.ff1 = FeedForward(d_model, d_ff, rng, dtype)
        self.ln_att = LayerNorm(d_model, dtype)
        self.attn = MultiHeadAttention(d_model, n_heads, rng, dtype,
                                       relative=True, max_rel=max_rel)
        self.ln_conv = LayerNorm(d_model, dtype)
        self.pw1 = Linear(d_model, 2 * d_model, rng, dtype)
        self.dw_w = _uniform(rng, (kernel, d_model), kernel, dtype)
        self.dw_b = _uniform(rng, (d_model,), kernel, dtype)
        self.ln_dw = LayerNorm(d_model, dtype)
        self.pw2 = Linear(d_model, d_model, rng, dtype)
        self.ln_ff2 = LayerNorm(d_model, dtype)
        self.ff2 = FeedForward(d_model, d_ff, rng, dtype)
        self.ln_out = LayerNorm(d_model, dtype)
        object.__setattr__(self, "d_model", d_model)

    def _conv_module(self, x: Tensor, valid_f: np.ndarray, ctx: ForwardCtx) -> Tensor:
        d = self.d_model
        h = self.pw1(self.ln_conv(x))
        a = ad.slice_axis(h, 2, 0, d)
        g = ad.slice_axis(h, 2, d, 2 * d)
        h = ad.mul(a, ad.sigmoid(g))
        h = ad.mul(h, Tensor(valid_f))           # zero pads before the conv
        h = ad.depthwise_conv1d(h, self.dw_w, self.dw_b)
        h = ad.swish(self.ln_dw(h))
        return self.pw2(h)

    def __call__(self, x: Tensor, valid: np.ndarray, ctx: ForwardCtx,
                 positions: np.ndarray | None = None) -> Tensor:
        if x.shape[1] == 0:
            raise ContractError("conformer layer: empty time axis")
        valid_f = valid[:, :, None].astype(x.data.dtype)
        amask = pad_attention_mask(valid)
        h = ad.add(x, ad.scale(ctx.drop(self.ff1(self.ln_ff1(x), ctx)), 0.5))
        h = ad.add(h, ctx.drop(self.attn(self.ln_att(h), self.ln_att(h), amask,
                                         ctx, positions)))
        h = ad.add(h, ctx.drop(self._conv_module(h, valid_f, ctx)))
        h = ad.add(h, ad.scale(ctx.drop(self.ff2(self.ln_ff2(h), ctx)), 0.5))
        h = self.ln_out(h)
        return ad.mul(h, Tensor(valid_f))


class TransformerEncoderLayer(Module):
    """Pre-norm Transformer encoder layer (used by the subtitle encoder)."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng, dtype="f32"):
        super().__init__()
        self.ln_att = LayerNorm(d_model, dtype)
        self.attn = MultiHeadAttention(d_model, n_heads, rng, dtype)
        self.ln_ff = LayerNorm(d_model, dtype)
        self.ff = FeedForward(d_model, d_ff, rng, dtype)

    def __call__(self, x: Tensor, valid: np.ndarray, ctx: ForwardCtx) -> Tensor:
        if x.shape[1] == 0:
            raise ContractError("transformer encoder layer: empty time axis")
        amask = pad_attention_mask(valid)
        h = ad.add(x, ctx.drop(self.attn(self.ln_att(x), self.ln_att(x), amask, ctx)))
        h = ad.add(h, ctx.drop(self.ff(self.ln_ff(h), ctx)))
        return ad.mul(h, Tensor(valid[:, :, None].astype(x.data.dtype)))


class TransformerDecoderLayer(Module):
    """Pre-norm decoder layer: causal self-attention, one cross-attention, FF."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng, dtype="f32"):
        super().__init__()
        self.ln_self = LayerNorm(d_model, dtype)
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng, dtype)
        self.ln_cross = LayerNorm(d_model, dtype)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng, dtype)
        self.ln_ff = LayerNorm(d_model, dtype)
        self.ff = FeedForward(d_model, d_ff, rng, dtype)

    def __call__(self, y: Tensor, memories, self_mask: np.ndarray,
                 ctx: ForwardCtx) -> Tensor:
        (mem, mem_mask), = memories
        if mem.shape[1] == 0:
            raise ContractError("decoder layer: empty memory")
        h = ad.add(y, ctx.drop(self.self_attn(self.ln_self(y), self.ln_self(y),
                                              self_mask, ctx)))
        h = ad.add(h, ctx.drop(self.cross_attn(self.ln_cross(h), mem, mem_mask, ctx)))
        h = ad.add(h, ctx.drop(self.ff(self.ln_ff(h), ctx)))
        return h


class MultiTransformerDecoderLayer(Module):
    """Decoder layer with two sequential cross-attentions over two memories."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng, dtype="f32"):
        super().__init__()
        self.ln_self = LayerNorm(d_model, dtype)
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng, dtype)
        self.ln_cross1 = LayerNorm(d_model, dtype)
        self.cross_attn1 = MultiHeadAttention(d_model, n_heads, rng, dtype)
        self.ln_cross2 = LayerNorm(d_model, dtype)
        self.cross_attn2 = MultiHeadAttention(d_model, n_heads, rng, dtype)
        self.ln_ff = LayerNorm(d_model, dtype)
        self.ff = FeedForward(d_model, d_ff, rng, dtype)

    def __call__(self, y: Tensor, memories, self_mask: np.ndarray,
                 ctx: ForwardCtx) -> Tensor:
        (mem1, mask1), (mem2, mask2) = memories
        if mem1.shape[1] == 0 or mem2.shape[1] == 0:
            raise ContractError("multi-decoder layer: empty memory")
        h = ad.add(y, ctx.drop(self.self_attn(self.ln_self(y), self.ln_self(y),
                                              self_mask, ctx)))
        h = ad.add(h, ctx.drop(self.cross_attn1(self.ln_cross1(h), mem1, mask1, ctx)))
        h = ad.add(h, ctx.drop(self.cross_attn2(self.ln_cross2(h), mem2, mask2, ctx)))
        h = ad.add(h, ctx.drop(self.ff(self.ln_ff(h), ctx)))
        return h


class Subsample(Module):
    """Two stride-2 3x3 conv2d stages followed by a linear map to d_model.

    Reduces the frame rate by four; output length is
    ``((T - 1) // 2 - 1) // 2``.
    """

    KERNEL = 3
    STRIDE = 2

    def __init__(self, feat_dim: int, d_model: int, rng, dtype="f32"):
        super().__init__()
        c = d_model
        self.w1 = _uniform(rng, (c, 1, 3, 3), 9, dtype)
        self.b1 = _uniform(rng, (c,), 9, dtype)
        self.w2 = _uniform(rng, (c, c, 3, 3), 9 * c, dtype)
        self.b2 = _uniform(rng, (c,), 9 * c, dtype)
        f2 = self.out_length(self.out_length(feat_dim))
        self.proj = Linear(c * f2, d_model, rng, dtype)
        object.__setattr__(self, "feat_dim", feat_dim)
        object.__setattr__(self, "channels", c)
        object.__setattr__(self, "freq_out", f2)

    @staticmethod
    def out_length(n: int) -> int:
        return (n - 1) // 2

    @classmethod
    def output_length(cls, t: int) -> int:
        return cls.out_length(cls.out_length(t))

    MIN_INPUT = 7  # smallest T with at least one output frame

    def __call__(self, x: Tensor, lengths: np.ndarray):
        b, t, f = x.shape
        if f != self.feat_dim:
            raise ShapeError(f"subsample: feature dim {f}, expected {self.feat_dim}")
        if t < self.MIN_INPUT or int(np.min(lengths)) < self.MIN_INPUT:
            raise LengthError(
                f"subsample needs at least {self.MIN_INPUT} frames, got {int(np.min(lengths))}"
            )
        h = ad.reshape(x, (b, 1, t, f))
        h = ad.relu(ad.conv2d(h, self.w1, self.b1, stride=2))
        h = ad.relu(ad.conv2d(h, self.w2, self.b2, stride=2))
        _, c, t2, f2 = h.shape
        h = ad.reshape(ad.transpose(h, (0, 2, 1, 3)), (b, t2, c * f2))
        out_lens = np.array([self.output_length(int(l)) for l in lengths])
        return self.proj(h), out_lens
