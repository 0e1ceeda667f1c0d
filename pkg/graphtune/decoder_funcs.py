"""decoder-only transformer functions"""

import math
from collections.abc import Mapping
from typing import Optional

import numpy as np
from compyute.nn.functional.activation_funcs import GELUFunction, SoftmaxFunction
from compyute.nn.functional.functions import Function, FunctionContext
from compyute.nn.functional.linear_funcs import LinearFunction
from compyute.nn.functional.normalization_funcs import LayerNormFunction
from compyute.tensor_ops.creation_ops import full, zeros
from compyute.tensor_ops.selection_ops import triu
from compyute.tensor_ops.shape_ops import concat, split
from compyute.tensors import ShapeError, Tensor

LN_EPS = 1e-5


def causal_mask(max_len: int) -> Tensor:
    """Additive ``(max_len, max_len)`` mask with ``-inf`` wherever a position would attend to a later one."""
    return triu(full((max_len, max_len), float("-inf")), diag_index=1)


def block_param_names(i: int) -> list[str]:
    """Returns the parameter names of transformer block ``i``."""
    p = f"blocks.{i}"
    return [
        f"{p}.ln1.w", f"{p}.ln1.b",
        f"{p}.attn.w_i", f"{p}.attn.b_i", f"{p}.attn.w_o", f"{p}.attn.b_o",
        f"{p}.ln2.w", f"{p}.ln2.b",
        f"{p}.mlp.up.w", f"{p}.mlp.up.b", f"{p}.mlp.down.w", f"{p}.mlp.down.b",
    ]  # fmt: skip


def decoder_param_names(n_blocks: int) -> list[str]:
    """Returns all parameter names of a decoder with ``n_blocks`` blocks."""
    names = ["token_emb", "pos_emb"]
    for i in range(n_blocks):
        names += block_param_names(i)
    return names + ["ln.w", "ln.b"]


class TransformerBlockFunction(Function):
    """Applies one pre-LayerNorm residual block: causal multi-head
    self-attention followed by a GELU MLP.

    Shapes:
        - Input :math:`(B, T, C)`
        - Output :math:`(B, T, C)`
    """

    @staticmethod
    def forward(
        ctx: FunctionContext,
        x: Tensor,
        params: Mapping[str, Tensor],
        prefix: str,
        n_heads: int,
        mask: Optional[Tensor],
    ) -> Tensor:
        p = lambda name: params[f"{prefix}.{name}"]
        b, t, c = x.shape
        head_shape = (b, t, n_heads, c // n_heads)

        a = LayerNormFunction.forward(ctx, x, p("ln1.w"), p("ln1.b"), LN_EPS)
        qkv = LinearFunction.forward(ctx, a, p("attn.w_i"), p("attn.b_i"))
        # (B, T, C) -> (B, H, T, C/H)
        q, k, v = (z.view(head_shape).transpose(1, 2).to_contiguous() for z in split(qkv, splits=3, dim=-1))
        scores = q @ k.T / math.sqrt(c // n_heads)
        if mask is not None:
            scores = scores + mask[:t, :t]
        weights = SoftmaxFunction.forward(ctx, scores, dim=-1)
        ctx.add(q, k, v, weights)
        heads = (weights @ v).transpose(1, 2).view((b, t, c))
        x = x + LinearFunction.forward(ctx, heads, p("attn.w_o"), p("attn.b_o"))

        m = LayerNormFunction.forward(ctx, x, p("ln2.w"), p("ln2.b"), LN_EPS)
        m = LinearFunction.forward(ctx, m, p("mlp.up.w"), p("mlp.up.b"))
        m = GELUFunction.forward(ctx, m)
        x = x + LinearFunction.forward(ctx, m, p("mlp.down.w"), p("mlp.down.b"))

        ctx.add(prefix, head_shape)
        return x

    @staticmethod
    def backward(ctx: FunctionContext, dy: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        prefix, head_shape = ctx.get()
        b, t, n_heads, head_size = head_shape
        grads: dict[str, Tensor] = {}
        g = lambda name: f"{prefix}.{name}"

        dm, grads[g("mlp.down.w")], grads[g("mlp.down.b")] = LinearFunction.backward(ctx, dy)
        dm = GELUFunction.backward(ctx, dm)
        dm, grads[g("mlp.up.w")], grads[g("mlp.up.b")] = LinearFunction.backward(ctx, dm)
        dm, grads[g("ln2.w")], grads[g("ln2.b")] = LayerNormFunction.backward(ctx, dm)
        dy = dy + dm

        dheads, grads[g("attn.w_o")], grads[g("attn.b_o")] = LinearFunction.backward(ctx, dy)
        q, k, v, weights = ctx.get()
        dheads = dheads.view(head_shape).transpose(1, 2).to_contiguous()
        dv = weights.T @ dheads
        dscores = SoftmaxFunction.backward(ctx, dheads @ v.T) / math.sqrt(head_size)
        dq = dscores @ k
        dk = dscores.T @ q
        # (B, H, T, C/H) -> (B, T, C)
        dqkv = concat([z.transpose(1, 2).view((b, t, n_heads * head_size)) for z in (dq, dk, dv)])
        da, grads[g("attn.w_i")], grads[g("attn.b_i")] = LinearFunction.backward(ctx, dqkv)
        da, grads[g("ln1.w")], grads[g("ln1.b")] = LayerNormFunction.backward(ctx, da)
        dy = dy + da

        return dy, grads


class GPTDecoderFunction(Function):
    """Maps input embeddings of shape ``(B, T, C)`` to next-token logits ``(B, T, V)``.

    Learned positions are added to the input, a stack of pre-LayerNorm blocks
    follows, and a final LayerNorm feeds a language-model head that shares its
    weight with the token embedding. The input embeddings are supplied by the
    caller, which lets graph tokens take the place of token embeddings at
    arbitrary positions.
    """

    @staticmethod
    def forward(
        ctx: FunctionContext,
        x: Tensor,
        params: Mapping[str, Tensor],
        n_heads: int,
        n_blocks: int,
        mask: Optional[Tensor],
    ) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(f"Expected input to be 3D, got {x.ndim}D.")
        pos_emb = params["pos_emb"]
        if x.shape[1] > pos_emb.shape[0]:
            raise ShapeError(f"Sequence length {x.shape[1]} exceeds context length {pos_emb.shape[0]}.")

        h = x + pos_emb[: x.shape[1]]
        for i in range(n_blocks):
            h = TransformerBlockFunction.forward(ctx, h, params, f"blocks.{i}", n_heads, mask)
        h = LayerNormFunction.forward(ctx, h, params["ln.w"], params["ln.b"], LN_EPS)
        logits = LinearFunction.forward(ctx, h, params["token_emb"], None)

        ctx.add(n_blocks, pos_emb.shape)
        return logits

    @staticmethod
    def backward(ctx: FunctionContext, dy: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        """Returns the input gradient and the parameter gradients.

        ``token_emb`` only holds the language-model-head part of its gradient; the
        lookup part depends on how the caller built the input embeddings.
        """
        n_blocks, pos_shape = ctx.get()
        grads: dict[str, Tensor] = {}

        dy, grads["token_emb"], _ = LinearFunction.backward(ctx, dy)
        dy, grads["ln.w"], grads["ln.b"] = LayerNormFunction.backward(ctx, dy)
        for _ in range(n_blocks):
            dy, block_grads = TransformerBlockFunction.backward(ctx, dy)
            grads.update(block_grads)

        t = dy.shape[1]
        grads["pos_emb"] = concat([dy.sum(0), zeros((pos_shape[0] - t, pos_shape[1]))], dim=0)
        return dy, grads


def init_decoder_weights(
    vocab_size: int,
    embed_dim: int,
    n_heads: int,
    n_blocks: int,
    max_len: int,
    mlp_channels: int,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    r"""Initializes decoder weights.

    Token and position embeddings are drawn from :math:`\mathcal{N}(0, 1/\sqrt{C})`,
    linear weights from :math:`\mathcal{U}(-k, k)` with :math:`k = 1/\sqrt{C_{in}}`.
    Biases start at zero, and both output projections of every block are scaled
    by :math:`1/\sqrt{2 \cdot n_{blocks}}`.
    """
    if embed_dim % n_heads:
        raise ValueError(f"embed_dim {embed_dim} is not divisible by n_heads {n_heads}.")
    std = 1.0 / math.sqrt(embed_dim)
    out_scale = 1.0 / math.sqrt(2 * n_blocks)

    def uniform(c_out: int, c_in: int) -> np.ndarray:
        k = 1.0 / math.sqrt(c_in)
        return rng.uniform(-k, k, size=(c_out, c_in))

    w = {
        "token_emb": rng.normal(0.0, std, size=(vocab_size, embed_dim)),
        "pos_emb": rng.normal(0.0, std, size=(max_len, embed_dim)),
    }
    for i in range(n_blocks):
        p = f"blocks.{i}"
        w[f"{p}.ln1.w"], w[f"{p}.ln1.b"] = np.ones(embed_dim), np.zeros(embed_dim)
        w[f"{p}.attn.w_i"] = uniform(3 * embed_dim, embed_dim)
        w[f"{p}.attn.b_i"] = np.zeros(3 * embed_dim)
        w[f"{p}.attn.w_o"] = uniform(embed_dim, embed_dim) * out_scale
        w[f"{p}.attn.b_o"] = np.zeros(embed_dim)
        w[f"{p}.ln2.w"], w[f"{p}.ln2.b"] = np.ones(embed_dim), np.zeros(embed_dim)
        w[f"{p}.mlp.up.w"] = uniform(mlp_channels, embed_dim)
        w[f"{p}.mlp.up.b"] = np.zeros(mlp_channels)
        w[f"{p}.mlp.down.w"] = uniform(embed_dim, mlp_channels) * out_scale
        w[f"{p}.mlp.down.b"] = np.zeros(embed_dim)
    w["ln.w"], w["ln.b"] = np.ones(embed_dim), np.zeros(embed_dim)
    return w
