"""Variational lower bounds on mutual information and the critics behind them.

Two bounds are implemented, both driven by a scalar critic f(x, y):

* mine_dv: the Donsker-Varadhan form, mean joint score minus the log of the
  mean exponentiated mismatched score. Optionally the gradient (not the
  value) replaces the batch denominator with an exponential moving average,
  which removes the bias that a small batch puts on the denominator.
* cpc: the contrastive ranking form. Each joint pair is scored against K
  mismatched partners; the raw value is the mean log-softmax weight of the
  true pair and is what training ascends. Adding log(K+1) turns it into an
  MI estimate, which can never exceed log(K+1).

Both objectives share one assembly routine so that pathways built on top of
them differ only in how they produce the score batch.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionMismatch, NumericError
from .numeric import (MlpSpec, ParamVector, init_mlp_params,
                      mlp_backward_from_cache, mlp_forward_cache)

BOUNDS = ("mine_dv", "cpc")


# ---------------------------------------------------------------------------
# Score containers
# ---------------------------------------------------------------------------

@dataclass
class ScoreBatch:
    """Critic scores for B joint pairs and K mismatched partners per pair."""

    joint: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        self.joint = np.asarray(self.joint, dtype=np.float64)
        self.negatives = np.asarray(self.negatives, dtype=np.float64)
        if self.joint.ndim != 1 or self.negatives.ndim != 2:
            raise DimensionMismatch("joint must be (B,), negatives (B, K)",
                                    where="ScoreBatch")
        if self.negatives.shape[0] != self.joint.shape[0]:
            raise DimensionMismatch(
                f"{self.negatives.shape[0]} negative rows for {self.joint.shape[0]} "
                "joint scores", where="ScoreBatch")
        if self.joint.shape[0] < 1 or self.negatives.shape[1] < 1:
            raise DimensionMismatch("need at least one pair and one negative",
                                    where="ScoreBatch")
        if not (np.all(np.isfinite(self.joint)) and np.all(np.isfinite(self.negatives))):
            raise NumericError("non-finite critic scores")

    @property
    def n_pairs(self) -> int:
        return self.joint.shape[0]

    @property
    def n_negatives(self) -> int:
        return self.negatives.shape[1]


@dataclass
class MIEstimate:
    """A lower-bound estimate in nats, tagged with the bound that produced it."""

    value_nats: float
    bound: str
    n_joint: int
    n_negatives: int
    normalized: bool = False

    def __post_init__(self):
        if self.bound not in BOUNDS:
            raise ValueError(f"unknown bound {self.bound!r}")
        if not np.isfinite(self.value_nats):
            raise NumericError(f"non-finite estimate {self.value_nats}")
        if self.n_joint < 1:
            raise ValueError("estimate needs at least one joint sample")
        if self.bound == "cpc":
            if self.n_negatives < 1:
                raise ValueError("contrastive bound needs at least one negative")
            cap = np.log(self.n_negatives + 1)
            if self.normalized and self.value_nats > cap + 1e-9:
                raise NumericError(
                    f"normalized contrastive estimate {self.value_nats:.6f} exceeds "
                    f"its cap log(K+1) = {cap:.6f}")


# ---------------------------------------------------------------------------
# Negative sampling
# ---------------------------------------------------------------------------

def sample_mismatched(owners: np.ndarray, n_choices: int, k: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Uniform partners from {0..n_choices-1} excluding each row's owner.

    owners: (N,) index of the item each row must not be paired with.
    Returns (N, K). Sampling draws from a range one short and shifts the
    draws at or above the owner up by one, which is exactly uniform over the
    remaining n_choices - 1 indices.
    """
    owners = np.asarray(owners, dtype=np.int64)
    if n_choices < 2:
        raise DimensionMismatch("need at least two items to mismatch",
                                where="negative sampling")
    if k < 1:
        raise DimensionMismatch("need at least one negative per row",
                                where="negative sampling")
    if owners.min() < 0 or owners.max() >= n_choices:
        raise DimensionMismatch("owner index out of range", where="negative sampling")
    raw = rng.integers(0, n_choices - 1, size=(owners.shape[0], k))
    return raw + (raw >= owners[:, None])


def shuffle_negatives(batch_size: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """(B, K) mismatched partner indices within a batch: never the row itself."""
    return sample_mismatched(np.arange(batch_size), batch_size, k, rng)


# ---------------------------------------------------------------------------
# Bound values and score gradients
# ---------------------------------------------------------------------------

def _logmeanexp(x: np.ndarray) -> float:
    return float(logsumexp(x) - np.log(x.size))


def update_log_ema(log_ema, batch_log_mean_exp: float, decay: float) -> float:
    """Running log of the DV denominator: ema <- decay*ema + (1-decay)*batch."""
    if not (0.0 < decay < 1.0):
        raise ValueError("decay must lie in (0, 1)")
    if log_ema is None:
        return float(batch_log_mean_exp)
    return float(np.logaddexp(np.log(decay) + log_ema,
                              np.log1p(-decay) + batch_log_mean_exp))


def _dv_value_grads(joint: np.ndarray, negatives: np.ndarray, log_ema=None):
    """Donsker-Varadhan value and its gradient w.r.t. every score.

    value = mean(joint) - logmeanexp(negatives). When log_ema is given the
    negative-score gradient uses exp(s - log_ema) / n in place of the batch
    softmax weights; the value itself is unchanged.
    """
    lme = _logmeanexp(negatives)
    value = float(np.mean(joint)) - lme
    d_joint = np.full(joint.shape, 1.0 / joint.size)
    denom = lme if log_ema is None else log_ema
    d_neg = -np.exp(negatives - denom) / negatives.size
    return value, lme, d_joint, d_neg


def _infonce_value_grads(joint: np.ndarray, negatives: np.ndarray):
    """Raw contrastive value (mean log-softmax of the joint score) and gradients."""
    b = joint.size
    cand = np.concatenate([joint[:, None], negatives], axis=1)
    lse = logsumexp(cand, axis=1)
    soft = np.exp(cand - lse[:, None])
    raw = float(np.mean(joint - lse))
    d_joint = (1.0 - soft[:, 0]) / b
    d_neg = -soft[:, 1:] / b
    return raw, d_joint, d_neg


def dv_bound(scores: ScoreBatch, log_ema=None) -> MIEstimate:
    value, _, _, _ = _dv_value_grads(scores.joint, scores.negatives, log_ema)
    return MIEstimate(value, "mine_dv", scores.n_pairs, scores.n_negatives)


def infonce_bound(scores: ScoreBatch, normalized: bool = True) -> MIEstimate:
    raw, _, _ = _infonce_value_grads(scores.joint, scores.negatives)
    value = raw + np.log(scores.n_negatives + 1) if normalized else raw
    return MIEstimate(float(value), "cpc", scores.n_pairs, scores.n_negatives,
                      normalized=normalized)


def assemble_bound(scores: ScoreBatch, bound: str, ema_decay=None, log_ema=None):
    """Shared tail of every objective: bound value, estimate, score gradients.

    Returns (train_value, estimate, d_joint, d_negatives, new_log_ema).
    train_value is what gradient ascent maximizes; for the contrastive bound
    that is the raw log-softmax value, while the estimate carries the
    log(K+1) shift. new_log_ema is passthrough unless ema_decay is set and
    the bound is mine_dv.
    """
    if bound not in BOUNDS:
        raise ValueError(f"unknown bound {bound!r}")
    if bound == "mine_dv":
        if ema_decay is not None:
            _, lme, _, _ = _dv_value_grads(scores.joint, scores.negatives)
            log_ema = update_log_ema(log_ema, lme, ema_decay)
        value, _, d_joint, d_neg = _dv_value_grads(scores.joint, scores.negatives,
                                                   log_ema if ema_decay is not None else None)
        estimate = MIEstimate(value, "mine_dv", scores.n_pairs, scores.n_negatives)
        return value, estimate, d_joint, d_neg, log_ema
    raw, d_joint, d_neg = _infonce_value_grads(scores.joint, scores.negatives)
    value = raw + np.log(scores.n_negatives + 1)
    estimate = MIEstimate(float(value), "cpc", scores.n_pairs, scores.n_negatives,
                          normalized=True)
    return raw, estimate, d_joint, d_neg, log_ema


# ---------------------------------------------------------------------------
# Exact Donsker-Varadhan evaluation on a finite joint table
# ---------------------------------------------------------------------------

def log_ratio_critic(joint_table: np.ndarray) -> np.ndarray:
    """The optimal DV critic log p(x,y) / (p(x) p(y)); -inf where p(x,y) = 0."""
    p = np.asarray(joint_table, dtype=np.float64)
    q = np.outer(p.sum(axis=1), p.sum(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.log(p) - np.log(q)
    f[p == 0.0] = -np.inf
    return f


def dv_bound_exact(joint_table: np.ndarray, critic_table: np.ndarray) -> float:
    """Donsker-Varadhan bound with exact expectations over a finite table.

    joint_table is a normalized 2-D pmf; critic_table gives f(x, y) per cell
    (-inf allowed, meaning e^f = 0). The result never exceeds the table's
    mutual information and touches it at the log-ratio critic.
    """
    p = np.asarray(joint_table, dtype=np.float64)
    f = np.asarray(critic_table, dtype=np.float64)
    if p.shape != f.shape or p.ndim != 2:
        raise DimensionMismatch("pmf and critic tables must share a 2-D shape",
                                where="dv_bound_exact")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("joint table must be a normalized pmf")
    if np.any(np.isnan(f)) or np.any(f == np.inf):
        raise NumericError("critic table must be finite or -inf")
    mask = p > 0
    if np.any(np.isneginf(f[mask])):
        return float("-inf")
    e_joint = float(np.sum(p[mask] * f[mask]))
    q = np.outer(p.sum(axis=1), p.sum(axis=0))
    log_e_prod = float(logsumexp(f, b=q))
    return e_joint - log_e_prod


# ---------------------------------------------------------------------------
# Critic
# ---------------------------------------------------------------------------

@dataclass
class Critic:
    """Scalar-output MLP scoring a concatenated (image, text) feature pair."""

    spec: MlpSpec
    params: ParamVector
    image_dim: int
    text_dim: int

    def __post_init__(self):
        if self.spec.layer_widths[0] != self.image_dim + self.text_dim:
            raise DimensionMismatch(
                f"critic input width {self.spec.layer_widths[0]} != "
                f"{self.image_dim} + {self.text_dim}", where="critic")
        if self.spec.layer_widths[-1] != 1:
            raise DimensionMismatch("critic output must be scalar", where="critic")


def init_critic(image_dim: int, text_dim: int, hidden, rng: np.random.Generator,
                activation: str = "relu") -> Critic:
    widths = (image_dim + text_dim,) + tuple(hidden) + (1,)
    spec = MlpSpec(widths, activation)
    return Critic(spec, init_mlp_params(spec, rng), image_dim, text_dim)


def critic_score_batch(critic: Critic, image_feats: np.ndarray, text_feats: np.ndarray):
    """Score N (image, text) rows. Returns (scores (N,), cache)."""
    image_feats = np.asarray(image_feats, dtype=np.float64)
    text_feats = np.asarray(text_feats, dtype=np.float64)
    if image_feats.ndim != 2 or text_feats.ndim != 2:
        raise DimensionMismatch("expected 2-D feature batches", where="critic")
    if image_feats.shape[0] != text_feats.shape[0]:
        raise DimensionMismatch(
            f"{image_feats.shape[0]} image rows vs {text_feats.shape[0]} text rows",
            where="critic")
    if image_feats.shape[1] != critic.image_dim or text_feats.shape[1] != critic.text_dim:
        raise DimensionMismatch(
            f"feature widths {image_feats.shape[1]}/{text_feats.shape[1]} do not match "
            f"critic dims {critic.image_dim}/{critic.text_dim}", where="critic")
    X = np.concatenate([image_feats, text_feats], axis=1)
    out, cache = mlp_forward_cache(critic.spec, critic.params, X)
    return out[:, 0], cache


def critic_score(critic: Critic, image_feat: np.ndarray, text_feat: np.ndarray) -> float:
    scores, _ = critic_score_batch(critic, np.asarray(image_feat)[None],
                                   np.asarray(text_feat)[None])
    return float(scores[0])


def critic_backward(critic: Critic, cache, d_scores: np.ndarray):
    """Gradients of sum(d_scores * scores) w.r.t. critic params and both inputs."""
    d_scores = np.asarray(d_scores, dtype=np.float64)
    pgrad, dX = mlp_backward_from_cache(critic.spec, critic.params, cache,
                                        d_scores[:, None])
    return pgrad, dX[:, :critic.image_dim], dX[:, critic.image_dim:]


# ---------------------------------------------------------------------------
# Whole-pair objective on precomputed features
# ---------------------------------------------------------------------------

@dataclass
class ObjectiveResult:
    """Everything a training step needs from one objective evaluation."""

    value: float
    estimate: MIEstimate
    critic_grad: ParamVector
    d_image_feats: np.ndarray
    d_text_feats: np.ndarray
    scores: ScoreBatch
    log_ema: object = None


def global_objective(image_feats: np.ndarray, text_feats: np.ndarray, critic: Critic,
                     bound: str, k_negatives: int, rng=None, negatives=None,
                     ema_decay=None, log_ema=None) -> ObjectiveResult:
    """Whole-image against whole-report bound on a feature batch.

    Negatives pair each image feature with the text feature of a mismatched
    batch partner. Pass `negatives` (a (B, K) index array) to pin the pairing
    explicitly; otherwise it is drawn from rng.
    """
    image_feats = np.asarray(image_feats, dtype=np.float64)
    text_feats = np.asarray(text_feats, dtype=np.float64)
    b = image_feats.shape[0]
    if b < 2:
        raise DimensionMismatch("mismatched pairing needs a batch of at least two",
                                where="global objective")
    if negatives is None:
        if rng is None:
            raise ValueError("either rng or an explicit negatives array is required")
        negatives = shuffle_negatives(b, k_negatives, rng)
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.shape != (b, k_negatives):
        raise DimensionMismatch(
            f"negatives shape {negatives.shape} != ({b}, {k_negatives})",
            where="global objective")

    joint, joint_cache = critic_score_batch(critic, image_feats, text_feats)
    k = k_negatives
    img_rep = np.repeat(image_feats, k, axis=0)
    text_neg = text_feats[negatives.reshape(-1)]
    neg_scores, neg_cache = critic_score_batch(critic, img_rep, text_neg)
    scores = ScoreBatch(joint, neg_scores.reshape(b, k))

    value, estimate, d_joint, d_neg, log_ema = assemble_bound(
        scores, bound, ema_decay=ema_decay, log_ema=log_ema)

    g_joint, d_img_j, d_txt_j = critic_backward(critic, joint_cache, d_joint)
    g_neg, d_img_n, d_txt_n = critic_backward(critic, neg_cache, d_neg.reshape(-1))
    critic_grad = ParamVector(g_joint.values + g_neg.values, critic.params.layout)

    d_image = d_img_j + d_img_n.reshape(b, k, -1).sum(axis=1)
    d_text = d_txt_j.copy()
    np.add.at(d_text, negatives.reshape(-1), d_txt_n)
    return ObjectiveResult(value, estimate, critic_grad, d_image, d_text, scores, log_ema)
