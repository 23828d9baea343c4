"""
Toy Vision Transformer: frozen backbone, prompt prepending (shallow and deep) and
forward traces exposing the blockwise attention decomposition.

Token matrices are (n, d) for a single example or (B, n, d) for a batch; prompts
always occupy the first n_p rows.
"""
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
from scipy.special import erf

from .config import VitConfig
from .digest import digest_arrays
from .errors import ParameterError
from .linalg import softmax_rows

log = logging.getLogger(__name__)

BLOCK_FIELDS = ("w_q", "w_k", "w_v", "b_q", "b_k", "b_v", "w_out", "b_out",
                "w_ffn_in", "b_ffn_in", "w_ffn_out", "b_ffn_out",
                "ln1_scale", "ln1_shift", "ln2_scale", "ln2_shift")
ATTENTION_BIASES = ("b_q", "b_k", "b_v")


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BlockWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    w_ffn_in: np.ndarray
    b_ffn_in: np.ndarray
    w_ffn_out: np.ndarray
    b_ffn_out: np.ndarray
    ln1_scale: np.ndarray
    ln1_shift: np.ndarray
    ln2_scale: np.ndarray
    ln2_shift: np.ndarray

    def shapes(self, d, hidden):
        return {"w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "b_q": (d,), "b_k": (d,), "b_v": (d,),
                "w_out": (d, d), "b_out": (d,), "w_ffn_in": (d, hidden), "b_ffn_in": (hidden,),
                "w_ffn_out": (hidden, d), "b_ffn_out": (d,),
                "ln1_scale": (d,), "ln1_shift": (d,), "ln2_scale": (d,), "ln2_shift": (d,)}

    def validate(self, d, hidden):
        for name, shape in self.shapes(d, hidden).items():
            value = getattr(self, name)
            if value.shape != shape:
                raise ParameterError("%s has shape %s, expected %s" % (name, value.shape, shape))
            if not np.all(np.isfinite(value)):
                raise ParameterError("%s has non-finite entries" % name)

    def frozen(self):
        return BlockWeights(**{name: _frozen(getattr(self, name)) for name in BLOCK_FIELDS})


class ForwardCounter:
    """
    Counts backbone forward passes over a batch. Safe to share between threads.
    """
    def __init__(self, count=0):
        self.count = count
        self._lock = threading.Lock()

    def increment(self):
        with self._lock:
            self.count += 1

    def __getstate__(self):
        return {"count": self.count}

    def __setstate__(self, state):
        self.__init__(state["count"])


@dataclass(frozen=True)
class PromptSet:
    """
    N_p x d learnable prompts with the initializer that produced them.
    """
    prompts: np.ndarray
    provenance: str
    deep_layer: Optional[int] = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        prompts = np.ascontiguousarray(self.prompts, dtype=np.float64)
        if prompts.ndim != 2 or prompts.shape[0] < 1:
            raise ParameterError("prompts must be a nonempty N_p x d matrix, got %s" % (prompts.shape,))
        if not np.all(np.isfinite(prompts)):
            raise ParameterError("prompts have non-finite entries")
        object.__setattr__(self, "prompts", prompts)

    @property
    def n_p(self):
        return self.prompts.shape[0]


@dataclass(frozen=True)
class FrozenBackbone:
    config: VitConfig
    patch_w: np.ndarray
    patch_b: np.ndarray
    pos_embed: np.ndarray
    cls_token: np.ndarray
    blocks: Tuple[BlockWeights, ...]
    head_w: np.ndarray
    head_b: np.ndarray
    counter: ForwardCounter = field(default_factory=ForwardCounter, compare=False, repr=False)

    def __post_init__(self):
        c = self.config
        d = c.embed_dim
        expected = {"patch_w": (c.patch_dim, d), "patch_b": (d,), "pos_embed": (c.token_count, d),
                    "cls_token": (d,), "head_w": (d, c.num_classes), "head_b": (c.num_classes,)}
        for name, shape in expected.items():
            value = _frozen(getattr(self, name))
            if value.shape != shape:
                raise ParameterError("%s has shape %s, expected %s" % (name, value.shape, shape))
            if not np.all(np.isfinite(value)):
                raise ParameterError("%s has non-finite entries" % name)
            object.__setattr__(self, name, value)
        if len(self.blocks) != c.depth:
            raise ParameterError("%s blocks for depth %s" % (len(self.blocks), c.depth))
        blocks = tuple(block.frozen() for block in self.blocks)
        for block in blocks:
            block.validate(d, c.ffn_hidden)
            if np.any(block.ln1_scale <= 0) or np.any(block.ln2_scale <= 0):
                log.debug("LayerNorm scale has non-positive entries")
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def random(cls, config, seed=0):
        """
        Randomly initialized backbone: Xavier-uniform matrices, zero biases, unit LayerNorm
        scales, N(0, pos_embed_std^2) positional embeddings and an N(0, 0.02^2) class embedding.
        """
        rng = np.random.default_rng(seed)
        d = config.embed_dim

        def xavier(fan_in, fan_out):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-a, a, size=(fan_in, fan_out))

        blocks = []
        for _ in range(config.depth):
            blocks.append(BlockWeights(
                w_q=xavier(d, d), w_k=xavier(d, d), w_v=xavier(d, d),
                b_q=np.zeros(d), b_k=np.zeros(d), b_v=np.zeros(d),
                w_out=xavier(d, d), b_out=np.zeros(d),
                w_ffn_in=xavier(d, config.ffn_hidden), b_ffn_in=np.zeros(config.ffn_hidden),
                w_ffn_out=xavier(config.ffn_hidden, d), b_ffn_out=np.zeros(d),
                ln1_scale=np.ones(d), ln1_shift=np.zeros(d), ln2_scale=np.ones(d), ln2_shift=np.zeros(d)))
        return cls(config=config,
                   patch_w=xavier(config.patch_dim, d), patch_b=np.zeros(d),
                   pos_embed=rng.normal(0.0, config.pos_embed_std, size=(config.token_count, d)),
                   cls_token=rng.normal(0.0, 0.02, size=d),
                   blocks=tuple(blocks),
                   head_w=np.zeros((d, config.num_classes)), head_b=np.zeros(config.num_classes))

    @classmethod
    def from_params(cls, config, params):
        """
        Builds a backbone from a flat name -> array mapping (see to_params()).
        """
        try:
            blocks = tuple(BlockWeights(**{name: params["blocks.%s.%s" % (i, name)] for name in BLOCK_FIELDS})
                           for i in range(config.depth))
            return cls(config=config, patch_w=params["patch_embed.weight"], patch_b=params["patch_embed.bias"],
                       pos_embed=params["pos_embed"], cls_token=params["cls_token"], blocks=blocks,
                       head_w=params["head.weight"], head_b=params["head.bias"])
        except KeyError as e:
            raise ParameterError("missing backbone parameter %s" % e)

    def to_params(self, include_head=True):
        params = OrderedDict()
        params["patch_embed.weight"] = self.patch_w
        params["patch_embed.bias"] = self.patch_b
        params["pos_embed"] = self.pos_embed
        params["cls_token"] = self.cls_token
        for i, block in enumerate(self.blocks):
            for name in BLOCK_FIELDS:
                params["blocks.%s.%s" % (i, name)] = getattr(block, name)
        if include_head:
            params["head.weight"] = self.head_w
            params["head.bias"] = self.head_b
        return params

    def with_head(self, num_classes=None, head_w=None, head_b=None):
        """
        Returns a backbone sharing every frozen weight but with a replaced head.
        Without explicit weights the new head is zero.
        """
        num_classes = num_classes or (head_w.shape[1] if head_w is not None else self.config.num_classes)
        config = self.config.model_copy(update={"num_classes": num_classes})
        d = config.embed_dim
        return replace(self, config=config,
                       head_w=np.zeros((d, num_classes)) if head_w is None else head_w,
                       head_b=np.zeros(num_classes) if head_b is None else head_b,
                       counter=self.counter)

    def digest(self, include_head=False):
        """
        SHA-256 over the frozen weights, in to_params() order.
        """
        return digest_arrays(self.to_params(include_head=include_head))


def _batched(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[None], True
    if a.ndim == 3:
        return a, False
    raise ParameterError("expected a 2-d or 3-d token array, got shape %s" % (a.shape,))


def embed(image, backbone):
    """
    E_0 = [cls; image W_patch + b_patch] + pos_embed for one image (num_patches x patch_dim).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ParameterError("image must be num_patches x patch_dim, got %s" % (image.shape,))
    return embed_batch(image[None], backbone)[0]


def embed_batch(images, backbone):
    c = backbone.config
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[1:] != (c.num_patches, c.patch_dim):
        raise ParameterError("images must be B x %s x %s, got %s" % (c.num_patches, c.patch_dim, images.shape))
    tokens = images @ backbone.patch_w + backbone.patch_b
    cls = np.broadcast_to(backbone.cls_token, (images.shape[0], 1, c.embed_dim))
    return np.concatenate([cls, tokens], axis=1) + backbone.pos_embed


def layer_norm(x, scale, shift, eps):
    """
    :return: (output, normalized input, reciprocal std)
    """
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    return xhat * scale + shift, xhat, rstd


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def split_heads(x, num_heads):
    b, n, d = x.shape
    return x.reshape(b, n, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


@dataclass(frozen=True)
class BlockRecord:
    """
    Intermediates of one block. Arrays carry a leading batch axis.
    """
    n_p: int
    num_heads: int
    weights: BlockWeights
    z_in: np.ndarray
    ln1_out: np.ndarray
    ln1_xhat: np.ndarray
    ln1_rstd: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn_heads: np.ndarray
    context: np.ndarray
    sa_out: np.ndarray
    y: np.ndarray
    ln2_out: np.ndarray
    ln2_xhat: np.ndarray
    ln2_rstd: np.ndarray
    ffn_pre: np.ndarray
    ffn_act: np.ndarray
    ffn_out: np.ndarray
    z_out: np.ndarray

    @property
    def attention(self):
        """
        Head-averaged attention, B x n x n.
        """
        return self.attn_heads.mean(axis=1)

    @property
    def s_pp(self):
        return self.attention[:, :self.n_p, :self.n_p]

    @property
    def s_px(self):
        return self.attention[:, :self.n_p, self.n_p:]

    @property
    def s_xp(self):
        return self.attention[:, self.n_p:, :self.n_p]

    @property
    def s_xx(self):
        return self.attention[:, self.n_p:, self.n_p:]

    @property
    def token_input(self):
        """
        Pre-LayerNorm token rows X entering the block.
        """
        return self.z_in[:, self.n_p:]

    @property
    def token_input_normed(self):
        return self.ln1_out[:, self.n_p:]


@dataclass(frozen=True)
class ForwardTrace:
    mode: str
    n_p: int
    e0: np.ndarray
    prompts: tuple
    records: tuple
    llcr: np.ndarray
    logits: np.ndarray
    replacement_events: int


def _attention(h, w, num_heads):
    """
    Multi-head attention on LayerNorm output h (B x n x d).
    """
    d = h.shape[-1]
    scale = 1.0 / np.sqrt(d // num_heads)
    q = split_heads(h @ w.w_q + w.b_q, num_heads)
    k = split_heads(h @ w.w_k + w.b_k, num_heads)
    v = split_heads(h @ w.w_v + w.b_v, num_heads)
    attn = softmax_rows(q @ k.swapaxes(-1, -2) * scale)
    context = merge_heads(attn @ v)
    return q, k, v, attn, context, context @ w.w_out + w.b_out


def self_attention(z, w, n_p, num_heads=1):
    """
    Multi-head self-attention with output projection.

    :return: (sa_out, (S_PP, S_PX, S_XP, S_XX)) where S is the head-averaged attention
        partitioned at row/column n_p.
    """
    zb, single = _batched(z)
    if not 0 <= n_p <= zb.shape[1]:
        raise ParameterError("n_p=%s out of range for %s rows" % (n_p, zb.shape[1]))
    _, _, _, attn, _, out = _attention(zb, w, num_heads)
    s = attn.mean(axis=1)
    blocks = (s[:, :n_p, :n_p], s[:, :n_p, n_p:], s[:, n_p:, :n_p], s[:, n_p:, n_p:])
    if single:
        return out[0], tuple(block[0] for block in blocks)
    return out, blocks


def block_forward(z, w, n_p, num_heads=1, ln_eps=1e-6):
    """
    Pre-norm residual block: y = z + SA(LN1(z)); z_next = y + FFN(LN2(y)).

    :return: (z_next, BlockRecord). The record always carries a batch axis.
    """
    zb, single = _batched(z)
    ln1_out, ln1_xhat, ln1_rstd = layer_norm(zb, w.ln1_scale, w.ln1_shift, ln_eps)
    q, k, v, attn, context, sa_out = _attention(ln1_out, w, num_heads)
    y = zb + sa_out
    ln2_out, ln2_xhat, ln2_rstd = layer_norm(y, w.ln2_scale, w.ln2_shift, ln_eps)
    ffn_pre = ln2_out @ w.w_ffn_in + w.b_ffn_in
    ffn_act = gelu(ffn_pre)
    ffn_out = ffn_act @ w.w_ffn_out + w.b_ffn_out
    z_out = y + ffn_out
    record = BlockRecord(n_p=n_p, num_heads=num_heads, weights=w, z_in=zb,
                         ln1_out=ln1_out, ln1_xhat=ln1_xhat, ln1_rstd=ln1_rstd,
                         q=q, k=k, v=v, attn_heads=attn, context=context, sa_out=sa_out, y=y,
                         ln2_out=ln2_out, ln2_xhat=ln2_xhat, ln2_rstd=ln2_rstd,
                         ffn_pre=ffn_pre, ffn_act=ffn_act, ffn_out=ffn_out, z_out=z_out)
    return (z_out[0] if single else z_out), record


def _prompt_matrix(prompts, d):
    if prompts is None:
        return np.zeros((0, d))
    if isinstance(prompts, PromptSet):
        return prompts.prompts
    prompts = np.asarray(prompts, dtype=np.float64)
    if prompts.ndim != 2 or prompts.shape[1] != d:
        raise ParameterError("prompts must be N_p x %s, got %s" % (d, prompts.shape))
    return prompts


def _prepend(prompts, tokens):
    return np.concatenate([np.broadcast_to(prompts, (tokens.shape[0],) + prompts.shape), tokens], axis=1)


def _head(z_last, n_p, backbone, head):
    head_w, head_b = (backbone.head_w, backbone.head_b) if head is None else head
    llcr = z_last[:, n_p]
    return llcr, llcr @ head_w + head_b


def forward_shallow(prompts, e0, backbone, head=None):
    """
    Z_0 = [P_0; E_0] through every block; logits from the class-token row of the last block.

    :param prompts: PromptSet, N_p x d array, or None for a prompt-free forward.
    :param e0: N_e x d or B x N_e x d embeddings.
    :param head: optional (weight, bias) used instead of the backbone head.
    :return: (logits, ForwardTrace)
    """
    if isinstance(prompts, PromptSet) and prompts.deep_layer is not None:
        raise ParameterError("deep-layer prompts passed to forward_shallow")
    c = backbone.config
    eb, single = _batched(e0)
    p = _prompt_matrix(prompts, c.embed_dim)
    n_p = p.shape[0]
    backbone.counter.increment()
    z = _prepend(p, eb)
    records = []
    for w in backbone.blocks:
        z, record = block_forward(z, w, n_p, c.num_heads, c.ln_eps)
        records.append(record)
    llcr, logits = _head(z, n_p, backbone, head)
    trace = ForwardTrace(mode="shallow", n_p=n_p, e0=eb, prompts=(p,), records=tuple(records),
                         llcr=llcr, logits=logits, replacement_events=1 if n_p else 0)
    return (logits[0] if single else logits), trace


def forward_deep(prompt_layers, e0, backbone, head=None):
    """
    A separate prompt P_l is prepended before block l; the prompt rows produced by
    block l are discarded before block l+1.

    :return: (logits, ForwardTrace)
    """
    c = backbone.config
    if len(prompt_layers) != c.depth:
        raise ParameterError("%s prompt layers for depth %s" % (len(prompt_layers), c.depth))
    layers = [_prompt_matrix(p, c.embed_dim) for p in prompt_layers]
    n_p = layers[0].shape[0]
    if any(p.shape[0] != n_p for p in layers):
        raise ParameterError("every layer needs the same N_p, got %s" % [p.shape[0] for p in layers])
    eb, single = _batched(e0)
    backbone.counter.increment()
    tokens = eb
    records = []
    for p, w in zip(layers, backbone.blocks):
        z, record = block_forward(_prepend(p, tokens), w, n_p, c.num_heads, c.ln_eps)
        records.append(record)
        tokens = z[:, n_p:]
    llcr, logits = _head(z, n_p, backbone, head)
    trace = ForwardTrace(mode="deep", n_p=n_p, e0=eb, prompts=tuple(layers), records=tuple(records),
                         llcr=llcr, logits=logits, replacement_events=len(layers))
    return (logits[0] if single else logits), trace


def forward(images, backbone):
    """
    Prompt-free forward over a batch of images.
    """
    return forward_shallow(None, embed_batch(images, backbone), backbone)


def fused_self_attention(x, w, include_bias=True):
    """
    Single-pathway SA(X) = softmax((X W_Q + b_Q)(X W_K + b_K)^T / sqrt(d)) (X W_V + b_V),
    without head splitting or output projection.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if include_bias:
        q, k, v = x @ w.w_q + w.b_q, x @ w.w_k + w.b_k, x @ w.w_v + w.b_v
    else:
        q, k, v = x @ w.w_q, x @ w.w_k, x @ w.w_v
    return softmax_rows(q @ k.swapaxes(-1, -2) / np.sqrt(d)) @ v


def prompt_bias_identity_check(record):
    """
    Evaluates both sides of

        S_XP (P W_V) + S_XX (X W_V) = S_XP (P W_V) + diag(1 - S_XP 1) SA(X)

    per head on the bias-free value path, with SA(X) recomputed prompt-free from the
    block's attention input, and returns the largest absolute discrepancy.
    """
    n_p = record.n_p
    if n_p == 0:
        return 0.0
    w = record.weights
    if np.any(w.b_v != 0):
        log.debug("b_v is nonzero; identity checked on the bias-free value path")
    h = record.ln1_out
    heads = record.num_heads
    scale = 1.0 / np.sqrt(h.shape[-1] // heads)
    values = split_heads(h @ w.w_v, heads)
    x = h[:, n_p:]
    q_x = split_heads(x @ w.w_q + w.b_q, heads)
    k_x = split_heads(x @ w.w_k + w.b_k, heads)
    sa_x = softmax_rows(q_x @ k_x.swapaxes(-1, -2) * scale) @ values[:, :, n_p:]
    s = record.attn_heads
    s_xp = s[:, :, n_p:, :n_p]
    s_xx = s[:, :, n_p:, n_p:]
    prompt_part = s_xp @ values[:, :, :n_p]
    lhs = prompt_part + s_xx @ values[:, :, n_p:]
    rhs = prompt_part + (1.0 - s_xp.sum(axis=-1, keepdims=True)) * sa_x
    return float(np.max(np.abs(lhs - rhs)))
