"""
Measurement instruments: prompt attention entropy, projection energy (single block and
per deep layer), Grassmannian subspace distance and paired representation distance.
"""
import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DegenerateRowWarning, ParameterError, UndefinedInputError
from .linalg import ZERO_NORM, as_matrix, normalize_rows, orthonormal_basis, projector_onto_colspace, svd
from .vit import fused_self_attention

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EntropyReport:
    per_prompt: List[float]
    mean: float
    max_attainable: float
    layer_index: int
    sample_count: int
    per_head: Optional[List[List[float]]] = None

    def to_rows(self):
        rows = []
        for i, value in enumerate(self.per_prompt):
            row = {"layer": self.layer_index, "prompt": i, "entropy": value, "max_attainable": self.max_attainable}
            if self.per_head is not None:
                for h, head_values in enumerate(self.per_head):
                    row["head_%s" % h] = head_values[i]
            rows.append(row)
        return rows


@dataclass(frozen=True)
class EnergyReport:
    value: float
    a_rank: int
    b_rank: int
    layer_index: int = 0
    step: Optional[int] = None
    extra: dict = field(default_factory=dict, compare=False)

    def to_row(self):
        row = {"layer": self.layer_index, "step": self.step, "energy": self.value,
               "a_rank": self.a_rank, "b_rank": self.b_rank}
        row.update(self.extra)
        return row


def _row_entropies(s):
    """
    Shannon entropy (nats) of each row after renormalizing it to sum to one.
    Works over the last axis of any array.
    """
    totals = s.sum(axis=-1, keepdims=True)
    zero = totals[..., 0] < ZERO_NORM
    if np.any(zero):
        msg = "%s all-zero attention rows, entropy set to 0" % int(zero.sum())
        log.warning(msg)
        warnings.warn(msg, DegenerateRowWarning, stacklevel=3)
    p = s / np.where(totals < ZERO_NORM, 1.0, totals)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.where(zero, 0.0, -terms.sum(axis=-1))


def prompt_attention_entropy(s_px, layer_index=-1, per_head=None):
    """
    Entropy of each prompt's attention over the input tokens.

    :param s_px: N_p x N_e, or B x N_p x N_e to average over samples.
    :param per_head: optional B x heads x N_p x N_e per-head blocks.
    :return: EntropyReport
    """
    s_px = np.asarray(s_px, dtype=np.float64)
    if s_px.ndim == 2:
        s_px = s_px[None]
    if s_px.ndim != 3:
        raise ParameterError("s_px must be N_p x N_e or B x N_p x N_e, got %s" % (s_px.shape,))
    if np.any(s_px < 0):
        raise ParameterError("attention entries must be nonnegative")
    per_prompt = _row_entropies(s_px).mean(axis=0)
    heads = None
    if per_head is not None:
        heads = _row_entropies(np.asarray(per_head, dtype=np.float64)).mean(axis=0).tolist()
    return EntropyReport(per_prompt=per_prompt.tolist(), mean=float(per_prompt.mean()),
                         max_attainable=float(np.log(s_px.shape[-1])), layer_index=layer_index,
                         sample_count=s_px.shape[0], per_head=heads)


def record_entropy(record, layer_index):
    """
    Head-averaged and per-head prompt entropy of one block of a trace.
    """
    n_p = record.n_p
    if n_p == 0:
        raise ParameterError("entropy needs a block with prompts")
    return prompt_attention_entropy(record.s_px, layer_index,
                                    per_head=record.attn_heads[:, :, :n_p, n_p:])


def final_layer_entropy(trace):
    return record_entropy(trace.records[-1], len(trace.records) - 1)


def projection_energy(a, b, layer_index=0, step=None):
    """
    ProjectionEnergy(A -> B) = ||P_B A||_F^2 / ||A||_F^2, P_B the projector onto span(B).

    :param a: d x m
    :param b: d x n
    :return: EnergyReport
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ParameterError("row dimension mismatch: %s vs %s" % (a.shape, b.shape))
    norm = np.linalg.norm(a)
    if norm < ZERO_NORM:
        raise UndefinedInputError("projection energy of a zero matrix")
    projected = projector_onto_colspace(b) @ a
    value = float(np.sum(projected * projected) / (norm * norm))
    return EnergyReport(value=value, a_rank=svd(a).numerical_rank, b_rank=svd(b).numerical_rank,
                        layer_index=layer_index, step=step)


def complement_energy(a, b):
    """
    Fraction of A outside span(B): ||(I - P_B) A||_F^2 / ||A||_F^2.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    norm = np.linalg.norm(a)
    if norm < ZERO_NORM:
        raise UndefinedInputError("projection energy of a zero matrix")
    rest = a - projector_onto_colspace(b) @ a
    return float(np.sum(rest * rest) / (norm * norm))


def prompt_energy(prompts, x, weights, layer_index=0, step=None, value_bias=False):
    """
    Energy of the prompts' value vectors (P W_V)^T inside the span of SA(X)^T.

    :param x: token rows (N_e x d or B x N_e x d, mean-pooled over the batch).
    :param value_bias: use P W_V + b_V.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x.mean(axis=0)
    values = prompts @ weights.w_v + (weights.b_v if value_bias else 0.0)
    return projection_energy(values.T, fused_self_attention(x, weights).T, layer_index, step)


def deep_projection_energy(trace, prompt_layers, backbone, normed=False, step=None):
    """
    Per block l, ProjectionEnergy((P_l W_V^l)^T -> SA_l(X_l)^T) with SA_l recomputed
    prompt-free from the token rows entering block l.

    :param normed: use the LayerNorm output of the token rows instead of the raw rows.
    :return: list of L EnergyReports.
    """
    if trace.mode != "deep":
        raise ParameterError("deep projection energy needs a deep-mode trace")
    if len(prompt_layers) != len(trace.records):
        raise ParameterError("%s prompt layers for %s blocks" % (len(prompt_layers), len(trace.records)))
    reports = []
    for layer, (record, p, w) in enumerate(zip(trace.records, prompt_layers, backbone.blocks)):
        p = getattr(p, "prompts", p)
        x = record.token_input_normed if normed else record.token_input
        reports.append(prompt_energy(np.asarray(p), x, w, layer_index=layer, step=step))
    return reports


def _principal_angles(q_a, q_b):
    cosines = np.clip(np.linalg.svd(q_a.T @ q_b, compute_uv=False), 0.0, 1.0)
    sines = np.clip(np.linalg.svd(q_b - q_a @ (q_a.T @ q_b), compute_uv=False), 0.0, 1.0)
    # Largest cosine pairs with smallest sine.
    return np.arctan2(sines[::-1], cosines)


def grassmannian_distance(reps_a, reps_b, subspace_dim=None):
    """
    sqrt(sum theta_i^2) over the principal angles between the leading subspace_dim
    directions spanned by the rows of each representation set.

    :param subspace_dim: defaults to the smaller numerical rank.
    """
    reps_a = as_matrix(reps_a, "reps_a")
    reps_b = as_matrix(reps_b, "reps_b")
    if reps_a.shape[1] != reps_b.shape[1]:
        raise ParameterError("dimension mismatch: %s vs %s" % (reps_a.shape[1], reps_b.shape[1]))
    rank_a = svd(reps_a).numerical_rank
    rank_b = svd(reps_b).numerical_rank
    if subspace_dim is None:
        subspace_dim = min(rank_a, rank_b)
    if subspace_dim < 1 or subspace_dim > min(rank_a, rank_b):
        raise ParameterError("subspace_dim %s exceeds ranks (%s, %s)" % (subspace_dim, rank_a, rank_b))
    q_a = orthonormal_basis(reps_a.T, subspace_dim)
    q_b = orthonormal_basis(reps_b.T, subspace_dim)
    theta = _principal_angles(q_a, q_b)
    return float(np.sqrt(np.sum(theta * theta)))


def paired_cosine_distance(reps_a, reps_b):
    """
    Mean of 1 - cos(a_i, b_i) over paired rows.
    """
    reps_a = as_matrix(reps_a, "reps_a")
    reps_b = as_matrix(reps_b, "reps_b")
    if reps_a.shape != reps_b.shape:
        raise ParameterError("paired representations need equal shapes, got %s and %s"
                             % (reps_a.shape, reps_b.shape))
    cos = np.sum(normalize_rows(reps_a) * normalize_rows(reps_b), axis=1)
    return float(np.mean(1.0 - cos))
