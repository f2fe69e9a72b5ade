"""A small discrete world with image and text views and exact information
oracles.

Each sample has R regions. Region r carries a latent state H_r drawn
uniformly and independently. One image nuisance variable V_img and one text
nuisance variable V_txt are shared by all regions of a sample. Region r
emits a patch symbol from p(z | H_r, V_img) and a sentence of L tokens drawn
iid from p(w | H_r, V_txt). Both emission tables interpolate between uniform
noise and a deterministic injective target map with one knob:

    p(symbol | H, V) = (1 - s) / n_symbols + s * [symbol == target(H, V)]

so s = 0 severs the views from the latents and s = 1 makes them
deterministic given (H, V). Patch symbols are rendered as fixed random
pixel tiles arranged in a square mosaic; sentences are shuffled into a fixed
per-world order so sentence position carries no region information by
accident of construction.

Because everything is a finite pmf, mutual informations are available
exactly by summation, which is what anchors the estimator checks elsewhere
in the package.
"""

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, StateSpaceError

STATE_SPACE_LIMIT = 2_000_000


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WorldConfig:
    n_regions: int = 4
    hidden_states: int = 3
    image_noise_states: int = 2
    text_noise_states: int = 2
    signal_strength: float = 0.5
    patch_symbols: int = 6
    vocab_size: int = 16
    sentence_length: int = 3
    covered_regions: int = 4
    tile_pixels: int = 16
    render_noise: float = 0.0

    def __post_init__(self):
        g = math.isqrt(self.n_regions)
        if g * g != self.n_regions:
            raise ConfigError(f"n_regions = {self.n_regions} is not a perfect square")
        if self.hidden_states < 2:
            raise ConfigError("hidden_states must be at least 2")
        if self.image_noise_states < 1 or self.text_noise_states < 1:
            raise ConfigError("noise state counts must be at least 1")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ConfigError("signal_strength must lie in [0, 1]")
        if self.patch_symbols < self.hidden_states * self.image_noise_states:
            raise ConfigError(
                f"patch_symbols = {self.patch_symbols} cannot hold an injective target "
                f"map for {self.hidden_states} x {self.image_noise_states} states")
        if self.vocab_size < self.hidden_states * self.text_noise_states:
            raise ConfigError(
                f"vocab_size = {self.vocab_size} cannot hold an injective target map "
                f"for {self.hidden_states} x {self.text_noise_states} states")
        if self.sentence_length < 1:
            raise ConfigError("sentence_length must be at least 1")
        if not 1 <= self.covered_regions <= self.n_regions:
            raise ConfigError("covered_regions must lie in [1, n_regions]")
        if self.tile_pixels < 1:
            raise ConfigError("tile_pixels must be at least 1")
        if self.render_noise < 0.0:
            raise ConfigError("render_noise must be nonnegative")

    @property
    def mosaic_side(self) -> int:
        return math.isqrt(self.n_regions)

    @property
    def image_pixels(self) -> int:
        return self.mosaic_side * self.tile_pixels

    @property
    def label_threshold(self) -> int:
        return (self.hidden_states + 1) // 2


def _interpolated_emission(targets: np.ndarray, n_symbols: int, s: float) -> np.ndarray:
    """(1-s)-uniform, s-deterministic rows; targets gives the peak per row."""
    h, v = targets.shape
    table = np.full((h, v, n_symbols), (1.0 - s) / n_symbols)
    hh, vv = np.meshgrid(np.arange(h), np.arange(v), indexing="ij")
    table[hh, vv, targets] += s
    return table


@dataclass
class GenerativeWorld:
    config: WorldConfig
    patch_emission: np.ndarray       # (H, V_img, patch_symbols)
    token_emission: np.ndarray       # (H, V_txt, vocab)
    sentence_regions: np.ndarray     # sentence slot m describes region sentence_regions[m]
    patterns: np.ndarray             # (patch_symbols, tile, tile) pixel tiles

    def __post_init__(self):
        for name, table in (("patch", self.patch_emission), ("token", self.token_emission)):
            sums = table.sum(axis=-1)
            if not np.allclose(sums, 1.0, atol=1e-12):
                raise NumericError(f"{name} emission rows must sum to 1")
            if np.any(table < 0):
                raise NumericError(f"{name} emission has negative entries")
        if len(set(self.sentence_regions.tolist())) != len(self.sentence_regions):
            raise ConfigError("sentence order must not repeat a region")

    def region_to_sentence(self) -> np.ndarray:
        """Sentence slot per region, -1 for regions no sentence describes."""
        out = np.full(self.config.n_regions, -1, dtype=np.int64)
        out[self.sentence_regions] = np.arange(len(self.sentence_regions))
        return out

    def world_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(repr(self.config).encode())
        for arr in (self.patch_emission, self.token_emission,
                    self.sentence_regions, self.patterns):
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()[:16]


def sample_world(config: WorldConfig, rng: np.random.Generator) -> GenerativeWorld:
    """Draw the fixed tables that define one world instance."""
    h, vi, vt = config.hidden_states, config.image_noise_states, config.text_noise_states
    patch_targets = rng.permutation(config.patch_symbols)[:h * vi].reshape(h, vi)
    token_targets = rng.permutation(config.vocab_size)[:h * vt].reshape(h, vt)
    sentence_regions = rng.permutation(config.n_regions)[:config.covered_regions]
    patterns = rng.random((config.patch_symbols, config.tile_pixels, config.tile_pixels))
    return GenerativeWorld(
        config=config,
        patch_emission=_interpolated_emission(patch_targets, config.patch_symbols,
                                              config.signal_strength),
        token_emission=_interpolated_emission(token_targets, config.vocab_size,
                                              config.signal_strength),
        sentence_regions=sentence_regions,
        patterns=patterns)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass
class WorldDataset:
    images: np.ndarray         # (n, pixels, pixels) float64 in [0, 1]
    report_tokens: np.ndarray  # (n, sentences, sentence_length) int64
    hiddens: np.ndarray        # (n, n_regions) int64
    labels: np.ndarray         # (n, n_regions) int64 in {0, 1}
    world_hash: str

    def __post_init__(self):
        n = self.images.shape[0]
        if not (self.report_tokens.shape[0] == self.hiddens.shape[0]
                == self.labels.shape[0] == n):
            raise NumericError("dataset arrays disagree on sample count")

    @property
    def n_samples(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "WorldDataset":
        return WorldDataset(self.images[idx], self.report_tokens[idx],
                            self.hiddens[idx], self.labels[idx], self.world_hash)


def _categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-cdf sampling along the last axis; u broadcasts against probs[..., :1]."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (u > cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def generate_dataset(world: GenerativeWorld, n: int, rng: np.random.Generator) -> WorldDataset:
    cfg = world.config
    if n < 1:
        raise ConfigError("need at least one sample")
    hid = rng.integers(0, cfg.hidden_states, size=(n, cfg.n_regions))
    v_img = rng.integers(0, cfg.image_noise_states, size=n)
    v_txt = rng.integers(0, cfg.text_noise_states, size=n)

    patch_probs = world.patch_emission[hid, v_img[:, None]]
    symbols = _categorical(patch_probs, rng.random((n, cfg.n_regions, 1)))

    token_probs = world.token_emission[hid, v_txt[:, None]]
    tokens = _categorical(token_probs[:, :, None, :],
                          rng.random((n, cfg.n_regions, cfg.sentence_length, 1)))

    g, t = cfg.mosaic_side, cfg.tile_pixels
    tiles = world.patterns[symbols]
    images = tiles.reshape(n, g, g, t, t).transpose(0, 1, 3, 2, 4).reshape(
        n, g * t, g * t)
    if cfg.render_noise > 0.0:
        images = images + rng.normal(0.0, cfg.render_noise, size=images.shape)
    images = np.clip(images, 0.0, 1.0)

    report_tokens = tokens[:, world.sentence_regions, :]
    labels = (hid >= cfg.label_threshold).astype(np.int64)
    return WorldDataset(images, report_tokens, hid.astype(np.int64),
                        labels, world.world_hash())


# ---------------------------------------------------------------------------
# Exact information quantities
# ---------------------------------------------------------------------------

def true_mi_discrete(joint_table: np.ndarray) -> float:
    """Mutual information of a 2-D pmf in nats, by direct summation."""
    p = np.asarray(joint_table, dtype=np.float64)
    if p.ndim != 2:
        raise NumericError("joint table must be 2-D")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise NumericError("joint table must be a normalized pmf")
    q = np.outer(p.sum(axis=1), p.sum(axis=0))
    mask = p > 0
    value = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))
    if value < -1e-12:
        raise NumericError(f"mutual information came out negative: {value}")
    return max(value, 0.0)


def _check_state_space(size: int, what: str):
    if size > STATE_SPACE_LIMIT:
        raise StateSpaceError(
            f"{what} has {size} states, over the exact-enumeration limit "
            f"{STATE_SPACE_LIMIT}")


def _patch_given_hidden(world: GenerativeWorld) -> np.ndarray:
    """(H, P): emission with the image nuisance summed out."""
    return world.patch_emission.mean(axis=1)


def _sentence_given_hidden(world: GenerativeWorld) -> np.ndarray:
    """(H, vocab^L): distribution of a full sentence tuple given the latent."""
    cfg = world.config
    n_tuples = cfg.vocab_size ** cfg.sentence_length
    _check_state_space(n_tuples * cfg.hidden_states, "sentence tuple table")
    out = np.zeros((cfg.hidden_states, n_tuples))
    for v in range(cfg.text_noise_states):
        for h in range(cfg.hidden_states):
            tup = np.ones(1)
            for _ in range(cfg.sentence_length):
                tup = np.kron(tup, world.token_emission[h, v])
            out[h] += tup / cfg.text_noise_states
    return out


def patch_hidden_joint(world: GenerativeWorld) -> np.ndarray:
    """(P, H) joint pmf of one region's patch symbol and its latent."""
    h = world.config.hidden_states
    return _patch_given_hidden(world).T / h


def sentence_hidden_joint(world: GenerativeWorld) -> np.ndarray:
    """(vocab^L, H) joint pmf of one region's sentence tuple and its latent."""
    h = world.config.hidden_states
    return _sentence_given_hidden(world).T / h


def patch_sentence_joint(world: GenerativeWorld) -> np.ndarray:
    """(P, vocab^L) joint pmf of one region's patch symbol and its sentence.

    Patch and sentence are conditionally independent given the latent (the
    two nuisance variables are independent), so the joint is a mixture of
    outer products over the latent.
    """
    cfg = world.config
    zh = _patch_given_hidden(world)
    sh = _sentence_given_hidden(world)
    _check_state_space(zh.shape[1] * sh.shape[1], "patch-sentence table")
    out = np.zeros((zh.shape[1], sh.shape[1]))
    for h in range(cfg.hidden_states):
        out += np.outer(zh[h], sh[h]) / cfg.hidden_states
    return out


@dataclass(frozen=True)
class RegionInformation:
    """Exact per-region ground truth (identical across regions by symmetry)."""

    patch_hidden_nats: float
    sentence_hidden_nats: float
    patch_sentence_nats: float


def region_information(world: GenerativeWorld) -> RegionInformation:
    return RegionInformation(
        patch_hidden_nats=true_mi_discrete(patch_hidden_joint(world)),
        sentence_hidden_nats=true_mi_discrete(sentence_hidden_joint(world)),
        patch_sentence_nats=true_mi_discrete(patch_sentence_joint(world)))


@dataclass(frozen=True)
class ChainRuleResult:
    joint_nats: float        # I((z_r, rest); H_r)
    marginal_nats: float     # I(z_r; H_r)
    conditional_nats: float  # I(rest; H_r | z_r)
    residual: float          # |joint - marginal - conditional|
    slack: float             # joint - marginal, what the rest of the image adds


def chain_rule_check(world: GenerativeWorld) -> ChainRuleResult:
    """Decompose the information one region plus the rest of the image carries.

    Enumerates p(z_0, z_rest, H_0) exactly. The other regions' latents are
    marginalized out; the shared image nuisance is what couples z_rest to
    region 0, so with a single image noise state the slack collapses to zero.
    """
    cfg = world.config
    n_rest = cfg.patch_symbols ** (cfg.n_regions - 1)
    _check_state_space(cfg.patch_symbols * n_rest * cfg.hidden_states,
                       "whole-image table")
    h, vi, p = cfg.hidden_states, cfg.image_noise_states, cfg.patch_symbols
    table = np.zeros((p, n_rest, h))
    for v in range(vi):
        z_given_hv = world.patch_emission[:, v, :]          # (H, P)
        z_other = z_given_hv.mean(axis=0)                   # (P,) latent summed out
        rest = np.ones(1)
        for _ in range(cfg.n_regions - 1):
            rest = np.kron(rest, z_other)
        table += (z_given_hv.T[:, None, :] * rest[None, :, None]) / (vi * h)

    joint = true_mi_discrete(table.reshape(p * n_rest, h))
    marginal = true_mi_discrete(table.sum(axis=1))
    conditional = 0.0
    for z in range(p):
        pz = table[z].sum()
        if pz > 0:
            conditional += pz * true_mi_discrete(table[z] / pz)
    residual = abs(joint - (marginal + conditional))
    return ChainRuleResult(joint, marginal, conditional, residual, joint - marginal)


# ---------------------------------------------------------------------------
# Correlated Gaussian pairs with closed-form information
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPairConfig:
    dim: int = 1
    rho: tuple = (0.9,)
    n_samples: int = 20000

    def __post_init__(self):
        rho = (self.rho,) * self.dim if np.isscalar(self.rho) else tuple(self.rho)
        object.__setattr__(self, "rho", rho)
        if len(self.rho) != self.dim:
            raise ConfigError(f"{len(self.rho)} correlations for dim = {self.dim}")
        if any(not -1.0 < r < 1.0 for r in self.rho):
            raise ConfigError("correlations must lie strictly inside (-1, 1)")
        if self.n_samples < 2 or self.dim < 1:
            raise ConfigError("need dim >= 1 and at least two samples")


def gaussian_mi_nats(rho) -> float:
    """I(U; V) for jointly Gaussian pairs with per-coordinate correlation rho."""
    r = np.atleast_1d(np.asarray(rho, dtype=np.float64))
    return float(-0.5 * np.sum(np.log1p(-r * r)))


def gaussian_pairs(config: GaussianPairConfig, rng: np.random.Generator):
    """Draw (U, V) with V = rho U + sqrt(1 - rho^2) eps, coordinatewise.

    Returns (U, V, true_mi_nats).
    """
    rho = np.asarray(config.rho)
    u = rng.standard_normal((config.n_samples, config.dim))
    eps = rng.standard_normal((config.n_samples, config.dim))
    v = rho * u + np.sqrt(1.0 - rho * rho) * eps
    return u, v, gaussian_mi_nats(rho)
