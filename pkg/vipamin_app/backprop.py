"""
Hand-derived reverse-mode pass through the toy ViT.

Gradients flow back from the mean cross-entropy to the prompt rows and the
classification head. Backbone weight gradients are only materialized when asked
for (pretraining and full fine-tuning).
"""
import logging

import numpy as np

from .errors import ParameterError
from .linalg import softmax_rows
from .vit import gelu_grad, merge_heads, split_heads

log = logging.getLogger(__name__)


def cross_entropy(logits, labels):
    """
    Mean cross-entropy and its gradient with respect to the logits.

    :return: (loss, dlogits)
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if len(labels) != b:
        raise ParameterError("%s labels for %s logits" % (len(labels), b))
    if b == 0:
        raise ParameterError("empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ParameterError("labels outside [0, %s)" % c)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(b), labels].mean()
    dlogits = softmax_rows(logits)
    dlogits[np.arange(b), labels] -= 1.0
    return float(loss), dlogits / b


def layer_norm_backward(dxhat, xhat, rstd):
    return rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                   - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def _outer(a, b):
    # Sum over batch and token axes.
    return np.einsum("bni,bnj->ij", a, b)


def block_backward(record, dz_out, want_weights=False):
    """
    Backward pass through one pre-norm block.

    :param record: BlockRecord from the forward pass.
    :param dz_out: gradient with respect to the block output (B x n x d).
    :return: (dz_in, weight gradients keyed by BlockWeights field, or None)
    """
    w = record.weights
    heads = record.num_heads
    grads = {} if want_weights else None

    # Feed-forward branch
    dy = dz_out.copy()
    d_act = dz_out @ w.w_ffn_out.T
    d_pre = d_act * gelu_grad(record.ffn_pre)
    d_ln2 = d_pre @ w.w_ffn_in.T
    dy += layer_norm_backward(d_ln2 * w.ln2_scale, record.ln2_xhat, record.ln2_rstd)
    if want_weights:
        grads["w_ffn_out"] = _outer(record.ffn_act, dz_out)
        grads["b_ffn_out"] = dz_out.sum(axis=(0, 1))
        grads["w_ffn_in"] = _outer(record.ln2_out, d_pre)
        grads["b_ffn_in"] = d_pre.sum(axis=(0, 1))
        grads["ln2_scale"] = (d_ln2 * record.ln2_xhat).sum(axis=(0, 1))
        grads["ln2_shift"] = d_ln2.sum(axis=(0, 1))

    # Attention branch
    dz_in = dy.copy()
    d_context = dy @ w.w_out.T
    d_ctx = split_heads(d_context, heads)
    attn = record.attn_heads
    d_attn = d_ctx @ record.v.swapaxes(-1, -2)
    dv = attn.swapaxes(-1, -2) @ d_ctx
    d_scores = attn * (d_attn - (attn * d_attn).sum(axis=-1, keepdims=True))
    scale = 1.0 / np.sqrt(record.q.shape[-1])
    dq = merge_heads(scale * d_scores @ record.k)
    dk = merge_heads(scale * d_scores.swapaxes(-1, -2) @ record.q)
    dv = merge_heads(dv)
    d_ln1 = dq @ w.w_q.T + dk @ w.w_k.T + dv @ w.w_v.T
    dz_in += layer_norm_backward(d_ln1 * w.ln1_scale, record.ln1_xhat, record.ln1_rstd)
    if want_weights:
        grads["w_out"] = _outer(record.context, dy)
        grads["b_out"] = dy.sum(axis=(0, 1))
        for name, d in (("q", dq), ("k", dk), ("v", dv)):
            grads["w_" + name] = _outer(record.ln1_out, d)
            grads["b_" + name] = d.sum(axis=(0, 1))
        grads["ln1_scale"] = (d_ln1 * record.ln1_xhat).sum(axis=(0, 1))
        grads["ln1_shift"] = d_ln1.sum(axis=(0, 1))
    return dz_in, grads


def backward(trace, labels, backbone, head=None, images=None, want_weights=False):
    """
    Loss and gradients for a forward trace.

    :param trace: ForwardTrace of forward_shallow or forward_deep.
    :param labels: class index per example.
    :param backbone: the backbone the trace was computed with.
    :param head: (weight, bias) if the forward used a head override.
    :param images: the input images; required for patch embedding gradients.
    :param want_weights: also return gradients for every backbone parameter.
    :return: (loss, grads) with keys "prompts", "head.weight", "head.bias" and, with
        want_weights, the FrozenBackbone.to_params() names.
    """
    head_w, head_b = (backbone.head_w, backbone.head_b) if head is None else head
    loss, dlogits = cross_entropy(trace.logits, labels)
    if not np.isfinite(loss):
        return loss, None
    grads = {"head.weight": trace.llcr.T @ dlogits, "head.bias": dlogits.sum(axis=0)}
    n_p = trace.n_p
    last = trace.records[-1]
    dz = np.zeros_like(last.z_out)
    dz[:, n_p] = dlogits @ head_w.T

    prompt_grads = []
    for i in reversed(range(len(trace.records))):
        record = trace.records[i]
        dz, block_grads = block_backward(record, dz, want_weights)
        if want_weights:
            for name, g in block_grads.items():
                grads["blocks.%s.%s" % (i, name)] = g
        if trace.mode == "deep":
            prompt_grads.append(dz[:, :n_p].sum(axis=0))
            # Prompt rows produced by the previous block are discarded.
            dz = np.concatenate([np.zeros_like(dz[:, :n_p]), dz[:, n_p:]], axis=1)
    if trace.mode == "deep":
        grads["prompts"] = np.stack(prompt_grads[::-1])
    else:
        grads["prompts"] = dz[:, :n_p].sum(axis=0)

    if want_weights:
        d_e0 = dz[:, n_p:]
        grads["pos_embed"] = d_e0.sum(axis=0)
        grads["cls_token"] = d_e0[:, 0].sum(axis=0)
        if images is None:
            raise ParameterError("images are required for patch embedding gradients")
        grads["patch_embed.weight"] = _outer(np.asarray(images, dtype=np.float64), d_e0[:, 1:])
        grads["patch_embed.bias"] = d_e0[:, 1:].sum(axis=(0, 1))
    return loss, grads
