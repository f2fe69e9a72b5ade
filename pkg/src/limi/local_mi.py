"""Local pairing objective over feature grids, and the composed pipelines.

Each (image, report) pair contributes one scoring unit per sentence. A unit
scores its sentence against every grid cell of its own image and keeps the
best cell; that one-way max lets a sentence bind to whichever region supports
it without requiring an alignment in the other direction. The kept score is
the unit's joint score. Negatives pair the kept cell with sentences drawn
from other reports in the batch. From there the scores flow into exactly the
same bound assembly as the whole-image objective, so a 1 x 1 grid with
single-sentence reports reproduces the whole-image objective identically.

Gradients follow the subgradient of the max: only the selected cell receives
gradient; every other cell of the map gets exactly zero.
"""

from dataclasses import dataclass

import numpy as np

from .encoders import (FeatureGrid, SentencePack, image_backward,
                       image_forward, text_backward, text_forward)
from .errors import DimensionMismatch
from .estimators import (Critic, MIEstimate, ScoreBatch, assemble_bound,
                         critic_backward, critic_score_batch,
                         global_objective, sample_mismatched)
from .numeric import ParamVector

POSITIVE_AGGREGATIONS = ("max", "mean")


@dataclass
class LocalScoreMap:
    """Critic scores of every (grid cell, sentence) pair for one sample."""

    scores: np.ndarray  # (n_cells, n_sentences), cells in row-major grid order

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] < 1 or self.scores.shape[1] < 1:
            raise DimensionMismatch("score map must be (n_cells, n_sentences)",
                                    where="LocalScoreMap")


@dataclass
class RegionSelection:
    """Winning grid cell per sentence; ties resolve to the lowest cell index."""

    cell_index: np.ndarray
    max_score: np.ndarray

    def __post_init__(self):
        self.cell_index = np.asarray(self.cell_index, dtype=np.int64)
        self.max_score = np.asarray(self.max_score, dtype=np.float64)
        if self.cell_index.shape != self.max_score.shape or self.cell_index.ndim != 1:
            raise DimensionMismatch("selection arrays must be aligned vectors",
                                    where="RegionSelection")


def select_regions(score_map: LocalScoreMap) -> RegionSelection:
    """Argmax over cells for each sentence. np.argmax keeps the first (lowest
    row-major) cell on ties, which pins the subgradient deterministically."""
    idx = np.argmax(score_map.scores, axis=0)
    best = score_map.scores[idx, np.arange(score_map.scores.shape[1])]
    return RegionSelection(idx, best)


def local_scores(grid: FeatureGrid, pack: SentencePack, critic: Critic) -> LocalScoreMap:
    """Score every grid cell of one image against every sentence of its report."""
    cells = grid.cells()
    sent = pack.stacked()
    n_cells, m = cells.shape[0], sent.shape[0]
    img_rows = np.repeat(cells, m, axis=0)
    txt_rows = np.tile(sent, (n_cells, 1))
    scores, _ = critic_score_batch(critic, img_rows, txt_rows)
    return LocalScoreMap(scores.reshape(n_cells, m))


@dataclass
class LocalObjectiveResult:
    """Objective value plus everything needed to continue the backward pass.

    d_sentences is flat over the concatenation of all reports' sentence
    features, aligned with pack_offsets.
    """

    value: float
    estimate: MIEstimate
    critic_grad: ParamVector
    d_grids: np.ndarray
    d_sentences: np.ndarray
    pack_offsets: np.ndarray
    score_maps: list
    selections: list
    scores: ScoreBatch
    log_ema: object = None


def _as_pack_list(packs):
    if isinstance(packs, np.ndarray):
        if packs.ndim != 3:
            raise DimensionMismatch("stacked packs must be (B, S, D)",
                                    where="local objective")
        return [packs[j] for j in range(packs.shape[0])]
    out = []
    for p in packs:
        p = p.stacked() if isinstance(p, SentencePack) else np.asarray(p, dtype=np.float64)
        if p.ndim != 2:
            raise DimensionMismatch("each pack must be (n_sentences, D)",
                                    where="local objective")
        out.append(p)
    return out


def local_objective_features(grids, packs, critic: Critic, bound: str,
                             k_negatives: int, rng=None, negatives=None,
                             sentence_picks=None, ema_decay=None, log_ema=None,
                             positive_aggregation: str = "max") -> LocalObjectiveResult:
    """Sentence-level contrastive bound over precomputed feature grids.

    grids: (B, M, M, D). packs: per-report sentence features, as a (B, S, D)
    array or a list of (n_sentences, D) arrays. Negative partners (and the
    sentence chosen within each partner) are drawn from rng unless pinned via
    `negatives` / `sentence_picks`.

    positive_aggregation chooses how a unit turns its score column into a
    joint score: "max" keeps the best cell (the default objective), "mean"
    averages all cells, kept as the ablation it is being compared against.
    Negatives use the max cell in both modes.
    """
    if positive_aggregation not in POSITIVE_AGGREGATIONS:
        raise ValueError(f"unknown aggregation {positive_aggregation!r}")
    grids = np.asarray(grids, dtype=np.float64)
    if grids.ndim != 4 or grids.shape[1] != grids.shape[2]:
        raise DimensionMismatch("grids must be (B, M, M, D)", where="local objective")
    b = grids.shape[0]
    if b < 2:
        raise DimensionMismatch("mismatched pairing needs a batch of at least two",
                                where="local objective")
    pack_list = _as_pack_list(packs)
    if len(pack_list) != b:
        raise DimensionMismatch(f"{len(pack_list)} packs for {b} grids",
                                where="local objective")
    counts = np.array([p.shape[0] for p in pack_list], dtype=np.int64)
    if counts.min() < 1:
        raise DimensionMismatch("every report needs at least one sentence",
                                where="local objective")
    all_sent = np.concatenate(pack_list, axis=0)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    n_units = all_sent.shape[0]
    n_cells = grids.shape[1] * grids.shape[2]
    cells = grids.reshape(b, n_cells, grids.shape[3])

    # one batched critic pass over every (pair, cell, sentence) triple
    img_rows = np.concatenate([np.repeat(cells[j], counts[j], axis=0) for j in range(b)])
    txt_rows = np.concatenate([np.tile(pack_list[j], (n_cells, 1)) for j in range(b)])
    map_scores, map_cache = critic_score_batch(critic, img_rows, txt_rows)
    sizes = n_cells * counts
    stops = np.cumsum(sizes)
    score_maps = []
    for j in range(b):
        block = map_scores[stops[j] - sizes[j]:stops[j]]
        score_maps.append(LocalScoreMap(block.reshape(n_cells, counts[j])))
    selections = [select_regions(sm) for sm in score_maps]

    owners = np.repeat(np.arange(b), counts)
    sel_cells = np.concatenate([s.cell_index for s in selections])
    sel_feats = cells[owners, sel_cells]

    if negatives is None:
        if rng is None:
            raise ValueError("either rng or an explicit negatives array is required")
        negatives = sample_mismatched(owners, b, k_negatives, rng)
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.shape != (n_units, k_negatives):
        raise DimensionMismatch(
            f"negatives shape {negatives.shape} != ({n_units}, {k_negatives})",
            where="local objective")
    if np.any(negatives == owners[:, None]):
        raise DimensionMismatch("a negative partner matches the unit's own report",
                                where="local objective")
    if sentence_picks is None:
        if rng is None:
            raise ValueError("either rng or explicit sentence_picks is required")
        sentence_picks = rng.integers(0, counts[negatives])
    sentence_picks = np.asarray(sentence_picks, dtype=np.int64)
    if sentence_picks.shape != negatives.shape:
        raise DimensionMismatch("sentence_picks must align with negatives",
                                where="local objective")
    if np.any(sentence_picks < 0) or np.any(sentence_picks >= counts[negatives]):
        raise DimensionMismatch("sentence pick outside its report",
                                where="local objective")
    neg_sent_idx = offsets[negatives] + sentence_picks

    if positive_aggregation == "max":
        joint, joint_cache = critic_score_batch(critic, sel_feats, all_sent)
    else:
        joint = np.concatenate([sm.scores.mean(axis=0) for sm in score_maps])
        joint_cache = None
    neg_img = np.repeat(sel_feats, k_negatives, axis=0)
    neg_txt = all_sent[neg_sent_idx.reshape(-1)]
    neg_scores, neg_cache = critic_score_batch(critic, neg_img, neg_txt)
    scores = ScoreBatch(joint, neg_scores.reshape(n_units, k_negatives))

    value, estimate, d_joint, d_neg, log_ema = assemble_bound(
        scores, bound, ema_decay=ema_decay, log_ema=log_ema)

    d_cells = np.zeros_like(cells)
    d_sent = np.zeros_like(all_sent)
    if positive_aggregation == "max":
        g_joint, d_img_j, d_txt_j = critic_backward(critic, joint_cache, d_joint)
        np.add.at(d_cells, (owners, sel_cells), d_img_j)
        d_sent += d_txt_j
    else:
        d_map = np.concatenate([np.tile(d_joint[offsets[j]:offsets[j] + counts[j]],
                                        n_cells) / n_cells for j in range(b)])
        g_joint, d_img_map, d_txt_map = critic_backward(critic, map_cache, d_map)
        row_owner = np.repeat(np.arange(b), sizes)
        row_cell = np.concatenate([np.repeat(np.arange(n_cells), counts[j])
                                   for j in range(b)])
        row_sent = np.concatenate([np.tile(np.arange(counts[j]) + offsets[j], n_cells)
                                   for j in range(b)])
        np.add.at(d_cells, (row_owner, row_cell), d_img_map)
        np.add.at(d_sent, row_sent, d_txt_map)

    g_neg, d_img_n, d_txt_n = critic_backward(critic, neg_cache, d_neg.reshape(-1))
    np.add.at(d_cells, (np.repeat(owners, k_negatives),
                        np.repeat(sel_cells, k_negatives)), d_img_n)
    np.add.at(d_sent, neg_sent_idx.reshape(-1), d_txt_n)

    critic_grad = ParamVector(g_joint.values + g_neg.values, critic.params.layout)
    return LocalObjectiveResult(
        value=value, estimate=estimate, critic_grad=critic_grad,
        d_grids=d_cells.reshape(grids.shape), d_sentences=d_sent,
        pack_offsets=offsets, score_maps=score_maps, selections=selections,
        scores=scores, log_ema=log_ema)


# ---------------------------------------------------------------------------
# Composed pipelines: raw batch -> encoders -> objective -> parameter grads
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    value: float
    estimate: MIEstimate
    image_grad: ParamVector
    text_grad: ParamVector
    critic_grad: ParamVector
    log_ema: object = None


def _encode_reports(tcfg, tparams, reports):
    flat = [np.asarray(s, dtype=np.int64) for report in reports for s in report]
    counts = np.array([len(report) for report in reports], dtype=np.int64)
    if counts.min() < 1:
        raise DimensionMismatch("every report needs at least one sentence",
                                where="pipeline")
    feats, cache = text_forward(tcfg, tparams, flat)
    return feats, cache, counts


def local_pipeline_objective(images, reports, icfg, iparams, tcfg, tparams,
                             critic: Critic, bound: str, k_negatives: int,
                             rng=None, ema_decay=None, log_ema=None) -> PipelineResult:
    """Encode a batch and apply the local objective; returns parameter grads.

    reports: per-sample list of sentences (token id sequences).
    """
    grid, _, icache = image_forward(icfg, iparams, images, with_global=False)
    feats, tcache, counts = _encode_reports(tcfg, tparams, reports)
    splits = np.cumsum(counts)[:-1]
    packs = np.split(feats, splits)
    res = local_objective_features(grid, packs, critic, bound, k_negatives,
                                   rng=rng, ema_decay=ema_decay, log_ema=log_ema)
    image_grad = image_backward(icfg, iparams, icache, d_grid=res.d_grids)
    text_grad = text_backward(tcfg, tparams, tcache, res.d_sentences)
    return PipelineResult(res.value, res.estimate, image_grad, text_grad,
                          res.critic_grad, res.log_ema)


def global_pipeline_objective(images, reports, icfg, iparams, tcfg, tparams,
                              critic: Critic, bound: str, k_negatives: int,
                              rng=None, ema_decay=None, log_ema=None) -> PipelineResult:
    """Whole-image, whole-report variant on the same encoders.

    The report feature is the mean of its sentence features, so the text
    encoder is shared with the local pathway unchanged.
    """
    _, gfeat, icache = image_forward(icfg, iparams, images, with_global=True)
    feats, tcache, counts = _encode_reports(tcfg, tparams, reports)
    owners = np.repeat(np.arange(len(counts)), counts)
    report_feats = np.zeros((len(counts), feats.shape[1]))
    np.add.at(report_feats, owners, feats)
    report_feats /= counts[:, None]
    res = global_objective(gfeat, report_feats, critic, bound, k_negatives,
                           rng=rng, ema_decay=ema_decay, log_ema=log_ema)
    image_grad = image_backward(icfg, iparams, icache, d_global=res.d_image_feats)
    d_sent = res.d_text_feats[owners] / counts[owners, None]
    text_grad = text_backward(tcfg, tparams, tcache, d_sent)
    return PipelineResult(res.value, res.estimate, image_grad, text_grad,
                          res.critic_grad, res.log_ema)
