"""Toy image and sentence encoders.

The image encoder is a stack of stride-2, kernel-3 convolutions producing an
M x M x D grid of local features; each grid cell sees only a limited pixel
receptive field (no global mixing before the grid). A global pathway adds one
more strided block, a spatial mean pool, and a dense layer.

The sentence encoder is a bag-of-tokens mean embedding followed by a 2-layer
MLP, one feature vector per sentence.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .numeric import (MlpSpec, ParamVector, _act, _act_grad, glorot_uniform,
                      mlp_backward_from_cache, mlp_forward_cache)

# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class ImageSample:
    """H x W pixel grid with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise DimensionMismatch("pixels must be 2-D", where="ImageSample")
        if not np.all(np.isfinite(self.pixels)):
            raise DimensionMismatch("pixels must be finite", where="ImageSample")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DimensionMismatch("pixels must lie in [0, 1]", where="ImageSample")


@dataclass
class ReportSample:
    """Ordered list of sentences, each a nonempty sequence of token ids."""

    sentences: list

    def __post_init__(self):
        if len(self.sentences) == 0:
            raise DimensionMismatch("report needs at least one sentence", where="ReportSample")
        cleaned = []
        for s in self.sentences:
            arr = np.asarray(s, dtype=np.int64)
            if arr.ndim != 1 or arr.size == 0:
                raise DimensionMismatch("each sentence must be a nonempty id sequence",
                                        where="ReportSample")
            if arr.min() < 0:
                raise DimensionMismatch("token ids must be nonnegative", where="ReportSample")
            cleaned.append(arr)
        self.sentences = cleaned


@dataclass
class FeatureGrid:
    """M x M x D block of local image features."""

    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3 or self.features.shape[0] != self.features.shape[1]:
            raise DimensionMismatch("features must be M x M x D", where="FeatureGrid")
        if not np.all(np.isfinite(self.features)):
            raise DimensionMismatch("grid features must be finite", where="FeatureGrid")

    @property
    def side(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[2]

    def cells(self) -> np.ndarray:
        """Row-major (M*M, D) view of the grid cells."""
        m, _, d = self.features.shape
        return self.features.reshape(m * m, d)


@dataclass
class GlobalFeature:
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1 or not np.all(np.isfinite(self.vector)):
            raise DimensionMismatch("global feature must be a finite vector",
                                    where="GlobalFeature")


@dataclass
class SentencePack:
    """One feature vector per sentence, in report order."""

    features: list

    def __post_init__(self):
        self.features = [np.asarray(f, dtype=np.float64) for f in self.features]
        for f in self.features:
            if f.ndim != 1 or not np.all(np.isfinite(f)):
                raise DimensionMismatch("sentence features must be finite vectors",
                                        where="SentencePack")

    def __len__(self) -> int:
        return len(self.features)

    def stacked(self) -> np.ndarray:
        return np.stack(self.features)


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageEncoderConfig:
    """Strided conv stack: image_size -> grid_side, channels[-1] = grid width D."""

    image_size: int = 32
    channels: tuple = (8, 16, 32)
    global_channels: int = 64
    global_dim: int = 64
    activation: str = "relu"

    def __post_init__(self):
        if self.image_size % (2 ** len(self.channels)) != 0:
            raise DimensionMismatch(
                f"image size {self.image_size} not divisible by total stride "
                f"{2 ** len(self.channels)}", where="ImageEncoderConfig")

    @property
    def grid_side(self) -> int:
        return self.image_size // (2 ** len(self.channels))

    @property
    def grid_width(self) -> int:
        return self.channels[-1]

    @property
    def n_grid_blocks(self) -> int:
        return len(self.channels)


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int = 32
    embed_dim: int = 32
    hidden_dim: int = 64
    text_dim: int = 32
    activation: str = "relu"

    def mlp_spec(self) -> MlpSpec:
        return MlpSpec((self.embed_dim, self.hidden_dim, self.text_dim), self.activation)


# ---------------------------------------------------------------------------
# Conv primitive (kernel 3, stride 2, pad 1)
# ---------------------------------------------------------------------------

_K = 3
_STRIDE = 2
_PAD = 1


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, H/2, W/2, 9*C) patches, kernel-position major."""
    b, h, w, c = x.shape
    ho, wo = h // _STRIDE, w // _STRIDE
    p = np.pad(x, ((0, 0), (_PAD, _PAD), (_PAD, _PAD), (0, 0)))
    cols = np.empty((b, ho, wo, _K * _K, c))
    for ki in range(_K):
        for kj in range(_K):
            cols[:, :, :, ki * _K + kj, :] = p[:, ki:ki + _STRIDE * ho - 1:_STRIDE,
                                               kj:kj + _STRIDE * wo - 1:_STRIDE, :]
    return cols.reshape(b, ho, wo, _K * _K * c)


def _col2im(dcols: np.ndarray, h: int, w: int, c: int) -> np.ndarray:
    """Adjoint of _im2col: scatter patch gradients back to (B, H, W, C)."""
    b, ho, wo, _ = dcols.shape
    dcols = dcols.reshape(b, ho, wo, _K * _K, c)
    dp = np.zeros((b, h + 2 * _PAD, w + 2 * _PAD, c))
    for ki in range(_K):
        for kj in range(_K):
            dp[:, ki:ki + _STRIDE * ho - 1:_STRIDE,
               kj:kj + _STRIDE * wo - 1:_STRIDE, :] += dcols[:, :, :, ki * _K + kj, :]
    return dp[:, _PAD:h + _PAD, _PAD:w + _PAD, :]


def _conv_forward(x, w, bias, activation):
    cols = _im2col(x)
    pre = cols @ w + bias
    return _act(activation, pre), (cols, pre, x.shape)


def _conv_backward(dout, w, cache, activation, need_dx=True):
    cols, pre, x_shape = cache
    dpre = dout * _act_grad(activation, pre)
    flat_cols = cols.reshape(-1, cols.shape[-1])
    flat_dpre = dpre.reshape(-1, dpre.shape[-1])
    dw = flat_cols.T @ flat_dpre
    db = flat_dpre.sum(axis=0)
    dx = None
    if need_dx:
        dcols = dpre @ w.T
        dx = _col2im(dcols, x_shape[1], x_shape[2], x_shape[3])
    return dw, db, dx


# ---------------------------------------------------------------------------
# Image encoder
# ---------------------------------------------------------------------------

def init_image_params(cfg: ImageEncoderConfig, rng: np.random.Generator) -> ParamVector:
    segments = {}
    c_in = 1
    for i, c_out in enumerate(cfg.channels):
        fan_in, fan_out = _K * _K * c_in, _K * _K * c_out
        segments[f"conv{i}_w"] = glorot_uniform((_K * _K * c_in, c_out), fan_in, fan_out, rng)
        segments[f"conv{i}_b"] = np.zeros(c_out)
        c_in = c_out
    i = len(cfg.channels)
    fan_in, fan_out = _K * _K * c_in, _K * _K * cfg.global_channels
    segments[f"conv{i}_w"] = glorot_uniform((_K * _K * c_in, cfg.global_channels),
                                            fan_in, fan_out, rng)
    segments[f"conv{i}_b"] = np.zeros(cfg.global_channels)
    segments["global_w"] = glorot_uniform((cfg.global_channels, cfg.global_dim),
                                          cfg.global_channels, cfg.global_dim, rng)
    segments["global_b"] = np.zeros(cfg.global_dim)
    return ParamVector.from_segments(segments)


def freeze_split(params: ParamVector, cfg: ImageEncoderConfig):
    """Partition segment names into (frozen, tunable).

    The conv stack that produces the feature grid is frozen; the global stage
    and everything above it stays tunable. The same split applies to encoders
    pretrained with either the local or the global objective.
    """
    frozen = []
    tunable = []
    for name in params.names():
        block = name.split("_")[0]
        if block.startswith("conv") and int(block[4:]) < cfg.n_grid_blocks:
            frozen.append(name)
        else:
            tunable.append(name)
    return frozen, tunable


def image_forward(cfg: ImageEncoderConfig, params: ParamVector, images: np.ndarray,
                  with_global: bool = True):
    """Batched encoder pass.

    images: (B, H, W) in [0, 1]. Returns (grid (B, M, M, D),
    global_feats (B, global_dim) or None, cache).
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[1] != cfg.image_size or images.shape[2] != cfg.image_size:
        raise DimensionMismatch(
            f"expected (B, {cfg.image_size}, {cfg.image_size}) images, got {images.shape}",
            where="image encoder")
    h = images[:, :, :, None]
    conv_caches = []
    for i in range(cfg.n_grid_blocks):
        h, cache = _conv_forward(h, params.segment(f"conv{i}_w"),
                                 params.segment(f"conv{i}_b"), cfg.activation)
        conv_caches.append(cache)
    grid = h
    if not with_global:
        return grid, None, (conv_caches, None)
    i = cfg.n_grid_blocks
    stage, stage_cache = _conv_forward(grid, params.segment(f"conv{i}_w"),
                                       params.segment(f"conv{i}_b"), cfg.activation)
    pooled = stage.mean(axis=(1, 2))
    gfeat = pooled @ params.segment("global_w") + params.segment("global_b")
    return grid, gfeat, (conv_caches, (stage_cache, stage.shape, pooled))


def image_backward(cfg: ImageEncoderConfig, params: ParamVector, cache,
                   d_grid=None, d_global=None) -> ParamVector:
    """Accumulate parameter gradients from grid-level and/or global-level upstreams."""
    conv_caches, global_cache = cache
    grads = {name: np.zeros(params.layout[name][1]) for name in params.names()}
    d_h = None
    if d_global is not None:
        if global_cache is None:
            raise DimensionMismatch("forward pass ran without the global stage",
                                    where="image encoder")
        stage_cache, stage_shape, pooled = global_cache
        grads["global_w"] += pooled.T @ d_global
        grads["global_b"] += d_global.sum(axis=0)
        d_pooled = d_global @ params.segment("global_w").T
        n_cells = stage_shape[1] * stage_shape[2]
        d_stage = np.broadcast_to(d_pooled[:, None, None, :] / n_cells,
                                  stage_shape).copy()
        i = cfg.n_grid_blocks
        dw, db, d_h = _conv_backward(d_stage, params.segment(f"conv{i}_w"),
                                     stage_cache, cfg.activation)
        grads[f"conv{i}_w"] += dw
        grads[f"conv{i}_b"] += db
    if d_grid is not None:
        d_h = d_grid if d_h is None else d_h + d_grid
    if d_h is None:
        raise DimensionMismatch("need at least one upstream gradient", where="image encoder")
    for i in reversed(range(cfg.n_grid_blocks)):
        dw, db, d_h = _conv_backward(d_h, params.segment(f"conv{i}_w"),
                                     conv_caches[i], cfg.activation, need_dx=i > 0)
        grads[f"conv{i}_w"] += dw
        grads[f"conv{i}_b"] += db
    return ParamVector.from_segments({name: grads[name] for name in params.names()})


def encode_image_local(image: ImageSample, cfg: ImageEncoderConfig,
                       params: ParamVector) -> FeatureGrid:
    grid, _, _ = image_forward(cfg, params, image.pixels[None], with_global=False)
    return FeatureGrid(grid[0])


def encode_image_global(image: ImageSample, cfg: ImageEncoderConfig,
                        params: ParamVector) -> GlobalFeature:
    _, gfeat, _ = image_forward(cfg, params, image.pixels[None], with_global=True)
    return GlobalFeature(gfeat[0])


def grid_receptive_field(cfg: ImageEncoderConfig, row: int, col: int):
    """Half-open pixel ranges ((r0, r1), (c0, c1)) feeding grid cell (row, col).

    Derived by walking the stride-2 kernel-3 pad-1 stack backwards: output
    index range [lo, hi) depends on input range [2*lo - 1, 2*hi).
    """
    def expand(lo, hi, size):
        for _ in range(cfg.n_grid_blocks):
            lo = 2 * lo - 1
            hi = 2 * hi
            size *= 2
        return max(lo, 0), min(hi, size), size

    m = cfg.grid_side
    if not (0 <= row < m and 0 <= col < m):
        raise DimensionMismatch(f"cell ({row}, {col}) outside {m} x {m} grid",
                                where="receptive field")
    r0, r1, _ = expand(row, row + 1, m)
    c0, c1, _ = expand(col, col + 1, m)
    return (r0, r1), (c0, c1)


# ---------------------------------------------------------------------------
# Sentence encoder
# ---------------------------------------------------------------------------

def init_text_params(cfg: TextEncoderConfig, rng: np.random.Generator) -> ParamVector:
    segments = {"embed": glorot_uniform((cfg.vocab_size, cfg.embed_dim),
                                        cfg.vocab_size, cfg.embed_dim, rng)}
    spec = cfg.mlp_spec()
    for l in range(spec.n_layers):
        n_in, n_out = spec.layer_widths[l], spec.layer_widths[l + 1]
        segments[f"w{l}"] = glorot_uniform((n_in, n_out), n_in, n_out, rng)
        segments[f"b{l}"] = np.zeros(n_out)
    return ParamVector.from_segments(segments)


def _text_mlp_params(cfg: TextEncoderConfig, params: ParamVector) -> ParamVector:
    spec = cfg.mlp_spec()
    segs = {}
    for l in range(spec.n_layers):
        segs[f"w{l}"] = params.segment(f"w{l}")
        segs[f"b{l}"] = params.segment(f"b{l}")
    return ParamVector.from_segments(segs)


def _sentence_tokens(cfg: TextEncoderConfig, sentences: list):
    """Validate and, when every sentence has one length, stack to (S, L)."""
    arrs = [np.asarray(sent, dtype=np.int64) for sent in sentences]
    for sent in arrs:
        if sent.size == 0:
            raise DimensionMismatch("empty sentence", where="text encoder")
        if sent.min() < 0 or sent.max() >= cfg.vocab_size:
            raise DimensionMismatch(
                f"token id outside vocabulary of size {cfg.vocab_size}",
                where="text encoder")
    if len({sent.shape for sent in arrs}) == 1:
        return np.stack(arrs)
    return arrs


def text_forward(cfg: TextEncoderConfig, params: ParamVector, sentences: list):
    """Encode a flat list of sentences (each an int id array).

    Returns (features (S, text_dim), cache). Order follows the input list.
    """
    embed = params.segment("embed")
    tokens = _sentence_tokens(cfg, sentences)
    if isinstance(tokens, np.ndarray):
        means = embed[tokens].mean(axis=1)
    else:
        means = np.empty((len(tokens), cfg.embed_dim))
        for i, sent in enumerate(tokens):
            means[i] = embed[sent].mean(axis=0)
    spec = cfg.mlp_spec()
    feats, mlp_cache = mlp_forward_cache(spec, _text_mlp_params(cfg, params), means)
    return feats, (tokens, means, mlp_cache)


def text_backward(cfg: TextEncoderConfig, params: ParamVector, cache,
                  d_feats: np.ndarray) -> ParamVector:
    tokens, _, mlp_cache = cache
    spec = cfg.mlp_spec()
    mlp_params = _text_mlp_params(cfg, params)
    mlp_grad, d_means = mlp_backward_from_cache(spec, mlp_params, mlp_cache, d_feats)
    d_embed = np.zeros(params.layout["embed"][1])
    if isinstance(tokens, np.ndarray):
        length = tokens.shape[1]
        np.add.at(d_embed, tokens.ravel(),
                  np.repeat(d_means / length, length, axis=0))
    else:
        for i, sent in enumerate(tokens):
            np.add.at(d_embed, sent, d_means[i] / sent.size)
    segs = {"embed": d_embed}
    for l in range(spec.n_layers):
        segs[f"w{l}"] = mlp_grad.segment(f"w{l}")
        segs[f"b{l}"] = mlp_grad.segment(f"b{l}")
    return ParamVector.from_segments({name: segs[name] for name in params.names()})


def encode_sentences(report: ReportSample, cfg: TextEncoderConfig,
                     params: ParamVector) -> SentencePack:
    feats, _ = text_forward(cfg, params, report.sentences)
    return SentencePack(list(feats))
