"""Acceptance suite: one test per shipped guarantee, verdict line included.

Tests 1-2 train critics on Gaussian pairs at the default estimate-mi
settings; 3-5 check the estimators against enumerated ground truth; 6 holds
every objective to central finite differences; 7-8 run the full default
experiment matrix once (shared module fixture, the slow part); 9 checks the
AUC implementation against brute-force pair counting; 10 reruns every CLI
subcommand and compares output bytes. Each test prints one PASS/FAIL line
so the log can be scanned without reading tracebacks.
"""

import hashlib
import itertools
import math
import os
import time

import numpy as np
import pytest

from limi.cli import main as cli_main
from limi.config import (Config, image_encoder_config, resolve_k_negatives,
                         text_encoder_config, world_config)
from limi.encoders import init_image_params, init_text_params
from limi.estimators import (Critic, dv_bound_exact, global_objective,
                             init_critic, log_ratio_critic, shuffle_negatives)
from limi.evaluation import ScoredLabelSet, auc, moving_average
from limi.local_mi import (local_objective_features, local_pipeline_objective,
                           local_scores)
from limi.numeric import ParamVector, grad_check
from limi.seeding import substream
from limi.trainer import (MatrixSettings, TrainConfig, build_matrix_datasets,
                          run_experiment_matrix, train_gaussian_critic)
from limi.world import (GaussianPairConfig, WorldConfig, chain_rule_check,
                        gaussian_mi_nats, gaussian_pairs,
                        patch_sentence_joint, sample_world, true_mi_discrete)


def _verdict(tag: str, passed: bool, detail: str = "") -> None:
    note = f" ({detail})" if detail else ""
    print(f"[acceptance] {tag}: {'PASS' if passed else 'FAIL'}{note}")
    assert passed, f"{tag}{note}"


def _gaussian_run(rho: float, bound: str, k_negatives=None):
    cfg = Config({})
    g = cfg.values["gaussian"]
    seed = cfg.get("train", "seed")
    pairs_cfg = GaussianPairConfig(dim=1, rho=(rho,),
                                   n_samples=g["n_samples"])
    u, v, truth = gaussian_pairs(pairs_cfg, substream(seed, "gaussian-data"))
    k = g["k_negatives"] if k_negatives is None else k_negatives
    res = train_gaussian_critic(
        u, v, bound, steps=g["steps"], batch_size=g["batch_size"],
        k_negatives=k, learning_rate=g["learning_rate"], seed=seed,
        critic_hidden=tuple(g["critic_hidden"]),
        activation=cfg.get("encoder", "activation"))
    return res, truth


def test_01_mine_recovers_gaussian_mi():
    t0 = time.monotonic()
    details = []
    ok = True
    for rho, stated in ((0.5, 0.1438), (0.9, 0.8304)):
        truth = gaussian_mi_nats(rho)
        assert round(truth, 4) == stated
        res, _ = _gaussian_run(rho, "mine_dv")
        gap = res.final_smoothed - truth
        peak = float(res.smoothed.max())
        ok = ok and abs(gap) <= 0.15 and peak <= truth + 0.05
        details.append(f"rho={rho}: final {res.final_smoothed:.4f} "
                       f"vs {truth:.4f}, peak {peak:.4f}")
    elapsed = time.monotonic() - t0
    ok = ok and elapsed < 120.0
    _verdict("mine gaussian recovery", ok,
             "; ".join(details) + f"; {elapsed:.0f}s")


def test_02_infonce_capped_and_recovers():
    t0 = time.monotonic()
    res, truth = _gaussian_run(0.9, "cpc", k_negatives=63)
    cap = math.log(64.0)
    capped = bool(np.all(res.estimates <= cap))
    final = res.final_smoothed
    elapsed = time.monotonic() - t0
    ok = capped and final >= 0.6 and elapsed < 120.0
    _verdict("infonce cap and recovery", ok,
             f"cap {cap:.4f} respected={capped}, final {final:.4f} "
             f"(truth {truth:.4f}), {elapsed:.0f}s")


def _small_world(seed: int, min_noise_states: int = 1) -> WorldConfig:
    rng = substream(seed, "acceptance-world")
    hidden = int(rng.integers(2, 4))
    vi = int(rng.integers(min_noise_states, 4))
    vt = int(rng.integers(min_noise_states, 3))
    return WorldConfig(
        n_regions=4, hidden_states=hidden, image_noise_states=vi,
        text_noise_states=vt,
        signal_strength=float(rng.uniform(0.3, 1.0)),
        patch_symbols=int(rng.integers(hidden * vi, hidden * vi + 3)),
        vocab_size=int(rng.integers(hidden * vt, hidden * vt + 3)),
        sentence_length=int(rng.integers(1, 3)), covered_regions=4,
        tile_pixels=2, render_noise=0.0)


def test_03_exact_dv_bound_below_true_mi():
    t0 = time.monotonic()
    n_critics = 0
    worst_excess = -np.inf
    worst_eq = 0.0
    for w in range(10):
        world = sample_world(_small_world(w), substream(w, "acc-dv"))
        joint = patch_sentence_joint(world)
        truth = true_mi_discrete(joint)
        rng = substream(w, "acc-dv-critics")
        for _ in range(10):
            f = rng.standard_normal(joint.shape) * rng.uniform(0.2, 3.0)
            f += rng.uniform(-2.0, 2.0)
            worst_excess = max(worst_excess, dv_bound_exact(joint, f) - truth)
            n_critics += 1
        eq_gap = abs(dv_bound_exact(joint, log_ratio_critic(joint)) - truth)
        worst_eq = max(worst_eq, eq_gap)
    elapsed = time.monotonic() - t0
    ok = (n_critics == 100 and worst_excess <= 0.0 and worst_eq <= 1e-9
          and elapsed < 60.0)
    _verdict("exact dv inequality", ok,
             f"{n_critics} critics, worst excess {worst_excess:.2e}, "
             f"log-ratio gap {worst_eq:.2e}, {elapsed:.0f}s")


def test_04_chain_rule_residual_and_slack():
    worst_residual = 0.0
    min_slack = np.inf
    for w in range(20):
        # at least two image noise states so the rest of the image genuinely
        # couples to the region label and the slack is strictly positive
        world = sample_world(_small_world(w, min_noise_states=2),
                             substream(w, "acc-chain"))
        r = chain_rule_check(world)
        worst_residual = max(worst_residual, r.residual)
        min_slack = min(min_slack, r.slack)
    ok = worst_residual < 1e-12 and min_slack >= 0.0
    _verdict("chain rule identity", ok,
             f"worst residual {worst_residual:.2e}, min slack {min_slack:.2e}")


def test_05_degenerate_local_equals_global():
    worst = 0.0
    n_batches = 0
    for seed, bound in itertools.product(range(5), ("mine_dv", "cpc")):
        rng = substream(seed, "acc-degen", bound)
        b, d, dt, k = 6, 3, 2, 3
        critic = init_critic(d, dt, (6,), rng, activation="tanh")
        img = rng.standard_normal((b, d))
        txt = rng.standard_normal((b, dt))
        negs = shuffle_negatives(b, k, rng)
        picks = np.zeros((b, k), dtype=np.int64)
        loc = local_objective_features(img.reshape(b, 1, 1, d),
                                       txt.reshape(b, 1, dt), critic, bound,
                                       k, negatives=negs, sentence_picks=picks)
        glob = global_objective(img, txt, critic, bound, k, negatives=negs)
        worst = max(worst,
                    abs(loc.value - glob.value),
                    abs(loc.estimate.value_nats - glob.estimate.value_nats),
                    float(np.max(np.abs(loc.critic_grad.values
                                        - glob.critic_grad.values))),
                    float(np.max(np.abs(loc.d_grids.reshape(b, d)
                                        - glob.d_image_feats))),
                    float(np.max(np.abs(loc.d_sentences - glob.d_text_feats))))
        n_batches += 1
    ok = n_batches == 10 and worst <= 1e-12
    _verdict("degenerate equivalence", ok,
             f"{n_batches} batches, worst deviation {worst:.2e}")


def _fd_bound_instance(seed: int, bound: str) -> float:
    """Max FD error of the bound objective's critic gradient, one instance."""
    rng = substream(seed, "acc-fd", bound)
    b, d, dt, k = 5, 3, 2, 3
    critic = init_critic(d, dt, (6,), rng, activation="tanh")
    img = rng.standard_normal((b, d))
    txt = rng.standard_normal((b, dt))
    negs = shuffle_negatives(b, k, rng)

    def fn(flat):
        c = Critic(critic.spec, ParamVector(flat, critic.params.layout),
                   critic.image_dim, critic.text_dim)
        res = global_objective(img, txt, c, bound, k, negatives=negs)
        return res.value, res.critic_grad.values

    return grad_check(fn, critic.params.values.copy())


def _fd_local_instance(seed: int):
    """FD errors for the composed local objective, or None near a kink.

    The one-way max makes the objective piecewise; instances where the best
    and runner-up cells are separated by less than the FD step's reach are
    rejected rather than tested, since central differences straddle the
    switch there.
    """
    from limi.encoders import ImageEncoderConfig, TextEncoderConfig

    icfg = ImageEncoderConfig(image_size=8, channels=(2, 3), global_channels=4,
                              global_dim=3, activation="tanh")
    tcfg = TextEncoderConfig(vocab_size=5, embed_dim=2, hidden_dim=3,
                             text_dim=2, activation="tanh")
    rng = substream(seed, "acc-fd-local")
    iparams = init_image_params(icfg, rng)
    tparams = init_text_params(tcfg, rng)
    critic = init_critic(icfg.grid_width, tcfg.text_dim, (6,), rng,
                         activation="tanh")
    b = 3
    images = rng.random((b, 8, 8))
    reports = [[rng.integers(0, 5, size=2) for _ in range(2)]
               for _ in range(b)]

    from limi.encoders import (FeatureGrid, SentencePack, image_forward,
                               text_forward)
    grid, _, _ = image_forward(icfg, iparams, images, with_global=False)
    margin = np.inf
    for i in range(b):
        feats, _ = text_forward(tcfg, tparams, reports[i])
        sm = local_scores(FeatureGrid(grid[i]), SentencePack(list(feats)),
                          critic)
        top2 = np.sort(sm.scores, axis=0)
        margin = min(margin, float((top2[-1] - top2[-2]).min()))
    if margin < 1e-3:
        return None

    def run(ip, tp, c):
        return local_pipeline_objective(images, reports, icfg, ip, tcfg, tp,
                                        c, "cpc", 2,
                                        rng=substream(seed, "acc-fd-negs"))

    def fn_image(flat):
        res = run(ParamVector(flat, iparams.layout), tparams, critic)
        return res.value, res.image_grad.values

    def fn_text(flat):
        res = run(iparams, ParamVector(flat, tparams.layout), critic)
        return res.value, res.text_grad.values

    def fn_critic(flat):
        c = Critic(critic.spec, ParamVector(flat, critic.params.layout),
                   critic.image_dim, critic.text_dim)
        res = run(iparams, tparams, c)
        return res.value, res.critic_grad.values

    return max(grad_check(fn_image, iparams.values.copy()),
               grad_check(fn_text, tparams.values.copy()),
               grad_check(fn_critic, critic.params.values.copy()))


def test_06_gradients_match_finite_differences():
    errors = []
    for seed in range(20):
        errors.append(_fd_bound_instance(seed, "mine_dv"))
        errors.append(_fd_bound_instance(seed, "cpc"))
    n_local = 0
    for seed in itertools.count():
        err = _fd_local_instance(seed)
        if err is None:
            continue
        errors.append(err)
        n_local += 1
        if n_local == 10:
            break
    worst = max(errors)
    ok = len(errors) == 50 and worst < 1e-4
    _verdict("finite difference suite", ok,
             f"{len(errors)} instances, worst relative error {worst:.2e}")


def _run_default_matrix(cfg: Config, out_dir: str):
    t = cfg.values["train"]
    world = sample_world(world_config(cfg),
                         substream(t["seed"], "world"))
    seeds = list(cfg.get("output", "seeds"))
    t0 = time.monotonic()
    datasets = build_matrix_datasets(world, seeds,
                                     n_train=cfg.get("data", "n_train"),
                                     n_test=cfg.get("data", "n_test"),
                                     n_labeled=cfg.get("data", "n_labeled"))
    train = TrainConfig(
        objective=t["objective"], bound=t["bound"],
        batch_size=t["batch_size"], epochs=t["epochs_pretrain"],
        learning_rate=t["learning_rate"], seed=t["seed"],
        ema_correction=t["ema_correction"], ema_decay=t["ema_decay"],
        k_negatives=resolve_k_negatives(t["k_negatives"], t["bound"],
                                        t["batch_size"]))
    settings = MatrixSettings(
        icfg=image_encoder_config(cfg), tcfg=text_encoder_config(cfg),
        train=train, probe_epochs=t["epochs_probe"],
        critic_hidden=tuple(cfg.get("encoder", "critic_hidden")),
        activation=cfg.get("encoder", "activation"),
        out_dir=out_dir, config_hash=cfg.config_hash(),
        k_negatives_raw=t["k_negatives"])
    res = run_experiment_matrix(world, datasets, settings, seeds, threads=1)
    return res, time.monotonic() - t0


@pytest.fixture(scope="module")
def matrix_result(tmp_path_factory):
    return _run_default_matrix(
        Config({}), str(tmp_path_factory.mktemp("acceptance-matrix")))


def _overall(table, arm, bound, mode) -> float:
    for r in table.rows:
        if (r.arm, r.bound, r.probe_mode, r.task) == (arm, bound, mode,
                                                      "overall"):
            return r.mean_auc
    raise AssertionError(f"no overall row for {arm}/{bound}/{mode}")


def test_07_tuned_local_leads_matrix(matrix_result):
    res, elapsed = matrix_result
    assert not res.failures, res.failures
    baseline = _overall(res.table, "image-only", "none", "scratch")
    details = [f"image-only {baseline:.4f}", f"{elapsed:.0f}s"]
    ok = elapsed < 1800.0
    for bound in ("mine_dv", "cpc"):
        local = _overall(res.table, "local-mi", bound, "tuned")
        glob = _overall(res.table, "global-mi", bound, "tuned")
        details.append(f"{bound}: local {local:.4f} global {glob:.4f}")
        ok = ok and local >= glob and local >= baseline
        ok = ok and (local - baseline) >= 0.02
    _verdict("tuned local leads", ok, ", ".join(details))


def test_08_frozen_segments_bitwise_intact(matrix_result):
    res, _ = matrix_result
    frozen = [o for o in res.outcomes if o.probe_mode == "frozen"]
    ok = (len(frozen) == 20
          and all(o.error == "" and o.frozen_intact for o in frozen))
    _verdict("frozen segments intact", ok,
             f"{len(frozen)} frozen arms checked")


def test_pretraining_objective_improves(matrix_result):
    """Window-100 smoothed objective ends above its starting value."""
    res, _ = matrix_result
    seen = set()
    ok = True
    for o in res.outcomes:
        if o.probe_mode != "frozen" or o.error:
            continue
        smooth = moving_average(o.pretrain_objective, 100)
        ok = ok and smooth[-1] > smooth[0]
        seen.add((o.arm, o.bound))
    ok = ok and len(seen) == 4
    _verdict("pretraining improves", ok, f"{len(seen)} families")


def _brute_force_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    ties = 0.0
    chunk = max(1, 2_000_000 // max(1, neg.size))
    for start in range(0, pos.size, chunk):
        diff = pos[start:start + chunk, None] - neg[None, :]
        wins += np.count_nonzero(diff > 0)
        ties += np.count_nonzero(diff == 0)
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def test_09_auc_equals_brute_force_count():
    rng = substream(0, "acc-auc")
    n_exact = 0
    mismatches = []
    for case in range(1000):
        n = 10_000 if case < 10 else int(
            np.exp(rng.uniform(np.log(2.0), np.log(2000.0))))
        labels = np.zeros(n, dtype=np.int64)
        labels[int(rng.integers(1, n)):] = 1   # both classes present
        labels = rng.permutation(labels)
        kind = case % 3
        if kind == 0:
            scores = rng.standard_normal(n)
        elif kind == 1:
            scores = rng.integers(0, max(2, n // 20), size=n).astype(float)
        else:
            scores = np.round(rng.standard_normal(n), 1)
        fast = auc(ScoredLabelSet(scores, labels))
        slow = _brute_force_auc(scores, labels)
        if fast == slow:
            n_exact += 1
        elif len(mismatches) < 3:
            mismatches.append((case, n, fast, slow))
    _verdict("auc oracle", n_exact == 1000,
             f"{n_exact}/1000 instances exact"
             + (f", first mismatches {mismatches}" if mismatches else ""))


ACC_CFG = """
[world]
n_regions = 4
hidden_states = 2
signal_strength = 0.9
patch_symbols = 4
vocab_size = 6
sentence_length = 2
tile_pixels = 4
render_noise = 0.05

[data]
n_train = 64
n_test = 48
n_labeled = 64

[encoder]
image_size = 8
grid_channels = 2, 3
global_channels = 4
global_dim = 6
embed_dim = 4
text_hidden = 5
text_dim = 4
critic_hidden = 8
activation = tanh

[train]
batch_size = 16
epochs_pretrain = 1
epochs_probe = 2
learning_rate = 5e-3

[gaussian]
steps = 60
batch_size = 32
k_negatives = 8
critic_hidden = 8
n_samples = 512

[output]
seeds = 0, 1
"""


def _hash_tree(root: str) -> dict:
    digests = {}
    for base, _, files in os.walk(root):
        for name in files:
            path = os.path.join(base, name)
            rel = os.path.relpath(path, root)
            with open(path, "rb") as fh:
                digests[rel] = hashlib.sha256(fh.read()).hexdigest()
    return digests


def test_10_cli_reruns_byte_identical(tmp_path):
    cfg_path = tmp_path / "acceptance.cfg"
    cfg_path.write_text(ACC_CFG)
    out = str(tmp_path / "run")
    commands = [
        ("gen-data",),
        ("estimate-mi",),
        ("pretrain",),
        ("probe", "--arm", "frozen"),
        ("probe", "--arm", "scratch"),
        ("matrix",),
        ("report",),
    ]

    def run_all():
        for cmd in commands:
            code = cli_main([cmd[0], "--config", str(cfg_path), "--out", out,
                             *cmd[1:]])
            assert code == 0, cmd
    run_all()
    first = _hash_tree(out)
    run_all()
    second = _hash_tree(out)
    changed = sorted(k for k in first
                     if second.get(k) != first[k]) + sorted(
                         k for k in second if k not in first)
    ok = bool(first) and not changed
    _verdict("cli reruns byte identical", ok,
             f"{len(first)} files stable" if ok else f"changed: {changed}")
