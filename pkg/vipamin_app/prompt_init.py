"""
Prompt initializers: Xavier, SPT/rand, VIPAMIN (matching + orthogonalizing) and
the per-layer VIPAMIN-Deep variant.
"""
import logging
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .digest import digest_array
from .errors import ConditioningWarning, DegenerateRowWarning, ParameterError
from .linalg import ZERO_NORM, as_matrix, cosine_rows, pseudoinverse, row_top_k_indices, svd
from .vit import PromptSet, embed_batch, forward_shallow, fused_self_attention

log = logging.getLogger(__name__)

# sigma_min / sigma_max of W_V below which the pseudoinverse is reported as ill-conditioned.
CONDITIONING_WARN = 1e-8


def layer_seed(seed, layer):
    """
    Seed of the random draw for a prompt layer; layer 0 uses the run seed itself.
    """
    return seed if layer == 0 else [seed, layer]


def xavier_init(n_p, d, seed=0):
    """
    Entries i.i.d. uniform on (-a, a) with a = sqrt(6 / (n_p + d)).
    """
    if n_p < 1 or d < 1:
        raise ParameterError("n_p and d must be positive, got %s, %s" % (n_p, d))
    a = np.sqrt(6.0 / (n_p + d))
    rng = np.random.default_rng(seed)
    return PromptSet(prompts=rng.uniform(-a, a, size=(n_p, d)), provenance="xavier",
                     metadata={"seed": seed, "bound": float(a)})


def mean_pool_batch(e0_batch):
    e0_batch = np.asarray(e0_batch, dtype=np.float64)
    if e0_batch.ndim != 3 or e0_batch.shape[0] < 1:
        raise ParameterError("expected a nonempty B x N_e x d batch, got %s" % (e0_batch.shape,))
    return e0_batch.mean(axis=0)


def spt_rand_init(e0_batch, n_p, seed=0):
    """
    Samples n_p token embeddings uniformly without replacement from the flattened batch.
    """
    e0_batch = np.asarray(e0_batch, dtype=np.float64)
    if e0_batch.ndim != 3:
        raise ParameterError("expected a B x N_e x d batch, got %s" % (e0_batch.shape,))
    pool = e0_batch.reshape(-1, e0_batch.shape[-1])
    if not 1 <= n_p <= len(pool):
        raise ParameterError("n_p=%s exceeds the %s available token embeddings" % (n_p, len(pool)))
    rng = np.random.default_rng(seed)
    indices = rng.permutation(len(pool))[:n_p]
    return PromptSet(prompts=pool[indices].copy(), provenance="spt-rand",
                     metadata={"seed": seed, "indices": indices.tolist()})


def _matched_means(e0_mean, scores, k, degenerate):
    indices = row_top_k_indices(scores, k)
    matched = e0_mean[indices].mean(axis=1)
    if len(degenerate):
        msg = "zero-norm projected prompts %s, using the mean of all tokens" % list(degenerate)
        log.warning(msg)
        warnings.warn(msg, DegenerateRowWarning, stacklevel=3)
        matched[degenerate] = e0_mean.mean(axis=0)
    return matched, indices


def _cosine_scores(p_feat, e_feat):
    degenerate = np.flatnonzero(np.linalg.norm(p_feat, axis=1) < ZERO_NORM)
    with warnings.catch_warnings():
        # Degenerate prompts are reported by _matched_means.
        warnings.simplefilter("ignore", DegenerateRowWarning)
        scores = cosine_rows(p_feat, e_feat)
    return scores, degenerate


def matching_init(p_rand, e0_mean, w_k, b_k=None, k=1, key_bias=False):
    """
    Replaces each prompt by the mean of the k raw E_0 rows whose keys are most cosine-similar
    to the prompt's key.

    :param p_rand: PromptSet or N_p x d array.
    :param key_bias: add b_K to both sides before the cosine.
    """
    p = p_rand.prompts if isinstance(p_rand, PromptSet) else as_matrix(p_rand, "p_rand")
    e0_mean = as_matrix(e0_mean, "e0_mean")
    if not 1 <= k <= len(e0_mean):
        raise ParameterError("k=%s out of range [1, %s]" % (k, len(e0_mean)))
    bias = b_k if (key_bias and b_k is not None) else 0.0
    scores, degenerate = _cosine_scores(p @ w_k + bias, e0_mean @ w_k + bias)
    matched, indices = _matched_means(e0_mean, scores, k, degenerate)
    return PromptSet(prompts=matched, provenance="vipamin-match",
                     metadata={"k": k, "key_bias": key_bias, "indices": indices.tolist()})


def matching_scores(p, e0_mean, weights, feature="key", key_bias=False):
    """
    Prompt-to-token similarity used for matching, in the chosen feature space.

    :return: (N_p x N_e scores, indices of degenerate prompts)
    """
    if feature == "embedding":
        return _cosine_scores(p, e0_mean)
    if feature == "attention":
        q = p @ weights.w_q + weights.b_q
        keys = e0_mean @ weights.w_k + weights.b_k
        return q @ keys.T / np.sqrt(p.shape[1]), np.array([], dtype=np.int64)
    w, b = {"key": (weights.w_k, weights.b_k),
            "query": (weights.w_q, weights.b_q),
            "value": (weights.w_v, weights.b_v)}[feature]
    bias = b if key_bias else 0.0
    return _cosine_scores(p @ w + bias, e0_mean @ w + bias)


def _check_conditioning(w_v):
    result = svd(w_v)
    s = result.singular_values
    ratio = s[-1] / s[0] if s[0] > 0 else 0.0
    if result.numerical_rank < min(w_v.shape) or ratio < CONDITIONING_WARN:
        msg = "W_V is ill-conditioned (sigma_min/sigma_max = %.3e, rank %s of %s)" % (
            ratio, result.numerical_rank, min(w_v.shape))
        log.warning(msg)
        warnings.warn(msg, ConditioningWarning, stacklevel=3)
    return ratio


def orthogonalizing_init(p_rand, sa_e0, w_v, b_v=None, orth_bias="value"):
    """
    Maps prompts into value space, removes the component inside the row space of SA(E_0)
    and maps back through the pseudoinverse of W_V.

    With orth_bias "value", p_orth = ((p W_V + b_V)(I - V V^T) - b_V) W_V^+, so that
    p_orth W_V + b_V is the projected value vector whenever W_V is invertible.
    With "literal", p_orth = (p W_V + b_V)(I - V V^T) W_V^+ - b_V. The two agree for b_V = 0.
    The default "value" is the form whose values p_orth W_V + b_V stay orthogonal to SA(E_0) when b_V != 0.
    """
    p = p_rand.prompts if isinstance(p_rand, PromptSet) else as_matrix(p_rand, "p_rand")
    sa_e0 = as_matrix(sa_e0, "sa_e0")
    w_v = as_matrix(w_v, "w_v")
    d = w_v.shape[1]
    b_v = np.zeros(d) if b_v is None else np.asarray(b_v, dtype=np.float64)
    ratio = _check_conditioning(w_v)
    _, _, v = svd(sa_e0).truncated()
    values = p @ w_v + b_v
    projected = values - (values @ v) @ v.T
    w_v_pinv = pseudoinverse(w_v)
    if orth_bias == "value":
        p_orth = (projected - b_v) @ w_v_pinv
    elif orth_bias == "literal":
        p_orth = projected @ w_v_pinv - b_v
    else:
        raise ParameterError("unknown orth_bias %s" % orth_bias)
    return PromptSet(prompts=p_orth, provenance="vipamin-orth",
                     metadata={"subspace_rank": v.shape[1], "w_v_condition": float(ratio), "orth_bias": orth_bias})


@dataclass(frozen=True)
class InitInputs:
    """
    Everything the VIPAMIN modules need, produced by one prompt-free forward.

    :param layer_batches: per block, the B x N_e x d token rows entering it (layer 0 is E_0).
    :param layer_inputs: the same rows mean-pooled over the batch.
    :param blocks: the backbone's BlockWeights.
    :param forward_passes: backbone forwards spent producing these inputs.
    """
    layer_batches: tuple
    layer_inputs: tuple
    blocks: tuple
    batch_digest: str
    forward_passes: int

    @property
    def e0_batch(self):
        return self.layer_batches[0]

    @property
    def e0_mean(self):
        return self.layer_inputs[0]

    @property
    def weights(self):
        return self.blocks[0]

    @property
    def sa_e0(self):
        return fused_self_attention(self.e0_mean, self.weights)

    def sa(self, layer):
        return fused_self_attention(self.layer_inputs[layer], self.blocks[layer])


def prepare_init_inputs(backbone, images, normed=False):
    """
    Runs one prompt-free forward over the batch and collects each block's mean-pooled input.

    :param normed: use the LayerNorm output instead of the raw rows for blocks after the first.
    """
    images = np.asarray(images, dtype=np.float64)
    before = backbone.counter.count
    _, trace = forward_shallow(None, embed_batch(images, backbone), backbone)
    layer_batches = [trace.e0]
    for record in trace.records[1:]:
        layer_batches.append(record.token_input_normed if normed else record.token_input)
    passes = backbone.counter.count - before
    log.debug("Collected init inputs from %s images with %s forward pass(es)", len(images), passes)
    return InitInputs(layer_batches=tuple(layer_batches),
                      layer_inputs=tuple(mean_pool_batch(rows) for rows in layer_batches), blocks=backbone.blocks,
                      batch_digest=digest_array(images), forward_passes=passes)


def _vipamin_layer(config, inputs, layer):
    weights = inputs.blocks[layer]
    x = inputs.layer_inputs[layer]
    d = x.shape[1]
    seed = layer_seed(config.seed, layer)
    p_rand = xavier_init(config.n_p, d, seed).prompts
    if not 1 <= config.k <= len(x):
        raise ParameterError("k=%s out of range [1, %s]" % (config.k, len(x)))

    start = time.perf_counter()
    if config.match_feature == "key":
        p_avg = matching_init(p_rand, x, weights.w_k, weights.b_k, config.k, config.key_bias).prompts
    else:
        scores, degenerate = matching_scores(p_rand, x, weights, config.match_feature, config.key_bias)
        p_avg, _ = _matched_means(x, scores, config.k, degenerate)
    matching_seconds = time.perf_counter() - start

    start = time.perf_counter()
    orth = orthogonalizing_init(p_rand, inputs.sa(layer), weights.w_v, weights.b_v, config.orth_bias)
    orthogonalizing_seconds = time.perf_counter() - start

    prompts = (1.0 - config.lam) * p_avg + config.lam * orth.prompts
    metadata = {"k": config.k, "lambda": config.lam, "seed": config.seed, "n_p": config.n_p,
                "key_bias": config.key_bias, "match_feature": config.match_feature,
                "orth_bias": config.orth_bias, "batch_digest": inputs.batch_digest,
                "forward_passes": inputs.forward_passes, "subspace_rank": orth.metadata["subspace_rank"],
                "matching_seconds": matching_seconds, "orthogonalizing_seconds": orthogonalizing_seconds}
    return prompts, metadata


def vipamin_init(config, inputs):
    """
    p = (1 - lambda) p_avg + lambda p_orth, both built from the same seeded random prompts.

    :param config: InitConfig
    :param inputs: InitInputs
    """
    prompts, metadata = _vipamin_layer(config, inputs, 0)
    log.debug("vipamin init: k=%s lambda=%s rank=%s", config.k, config.lam, metadata["subspace_rank"])
    return PromptSet(prompts=prompts, provenance="vipamin", metadata=metadata)


def vipamin_deep_init(config, backbone, batch, normed=False):
    """
    One prompt-free forward over the batch, then the VIPAMIN modules per block against that
    block's mean-pooled input and attention weights.

    :return: list of L PromptSets.
    """
    inputs = prepare_init_inputs(backbone, batch, normed=normed)
    layers = []
    for layer in range(len(inputs.blocks)):
        prompts, metadata = _vipamin_layer(config, inputs, layer)
        layers.append(PromptSet(prompts=prompts, provenance="vipamin-deep", deep_layer=layer, metadata=metadata))
    return layers


def init_batch(images, batch_size, seed):
    """
    Random minibatch of at most batch_size images used for VIPAMIN inputs.
    """
    rng = np.random.default_rng(seed)
    if len(images) <= batch_size:
        return images
    return images[np.sort(rng.choice(len(images), size=batch_size, replace=False))]


def initialize(initializer, config, backbone, images, mode="shallow"):
    """
    Runs an initializer against a backbone and the downstream training images.

    :param initializer: xavier, spt-rand, vipamin or vipamin-deep.
    :param config: InitConfig
    :param mode: shallow or deep.
    :return: PromptSet (shallow) or list of PromptSets (deep), and an overhead report.
    """
    d = backbone.config.embed_dim
    depth = backbone.config.depth
    before = backbone.counter.count
    start = time.perf_counter()
    if initializer == "xavier":
        if mode == "deep":
            result = [PromptSet(prompts=xavier_init(config.n_p, d, layer_seed(config.seed, layer)).prompts,
                                provenance="xavier", deep_layer=layer, metadata={"seed": config.seed})
                      for layer in range(depth)]
        else:
            result = xavier_init(config.n_p, d, config.seed)
    elif initializer == "spt-rand":
        # Sampled from the full training set.
        if mode == "deep":
            inputs = prepare_init_inputs(backbone, images)
            result = []
            for layer in range(depth):
                sample = spt_rand_init(inputs.layer_batches[layer], config.n_p, layer_seed(config.seed, layer))
                result.append(PromptSet(prompts=sample.prompts, provenance="spt-rand", deep_layer=layer,
                                        metadata=sample.metadata))
        else:
            result = spt_rand_init(embed_batch(images, backbone), config.n_p, config.seed)
    elif initializer == "vipamin":
        if mode == "deep":
            raise ParameterError("vipamin is shallow; use vipamin-deep")
        result = vipamin_init(config, prepare_init_inputs(backbone, init_batch(images, config.batch_size, config.seed)))
    elif initializer == "vipamin-deep":
        if mode != "deep":
            raise ParameterError("vipamin-deep requires deep mode")
        result = vipamin_deep_init(config, backbone, init_batch(images, config.batch_size, config.seed))
    else:
        raise ParameterError("unknown initializer %s" % initializer)
    overhead = {"forward_passes": backbone.counter.count - before, "init_seconds": time.perf_counter() - start}
    log.info("Initialized %s prompts (%s) with %s forward pass(es) in %.3fs", initializer, mode,
             overhead["forward_passes"], overhead["init_seconds"])
    return result, overhead

