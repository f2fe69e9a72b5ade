"""Training loops: multimodal pretraining, downstream probes, the arm matrix.

Every loop draws its randomness from named substreams of one run seed, so a
rerun with the same config reproduces every batch order, negative pairing and
parameter init exactly. Wall-clock timings stay in memory; nothing
time-dependent reaches the files a run writes.
"""

import os
import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .config import resolve_k_negatives
from .dataio import save_checkpoint, train_log_csv_text, write_text_file
from .encoders import (freeze_split, image_backward, image_forward,
                       init_image_params, init_text_params)
from .errors import ConfigError, NumericAbort, NumericError
from .estimators import BOUNDS, Critic, global_objective, init_critic
from .evaluation import ResultsTable, ScoredLabelSet, auc, moving_average
from .local_mi import global_pipeline_objective, local_pipeline_objective
from .numeric import (MlpSpec, ParamVector, adam_step, init_adam,
                      init_mlp_params, mlp_backward_from_cache,
                      mlp_forward_cache)
from .seeding import substream
from .world import WorldDataset, gaussian_pairs, generate_dataset, sample_world

OBJECTIVES = ("local", "global")
PROBE_MODES = ("frozen", "finetune", "scratch")


@dataclass(frozen=True)
class TrainConfig:
    """Settings for one pretraining run."""

    objective: str
    bound: str
    batch_size: int = 64
    epochs: int = 5
    learning_rate: float = 5e-4
    seed: int = 0
    ema_correction: bool = False
    ema_decay: float = 0.99
    k_negatives: int = 1

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.bound not in BOUNDS:
            raise ConfigError(f"bound must be one of {BOUNDS}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if not self.learning_rate > 0.0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)")
        if not 1 <= self.k_negatives <= self.batch_size - 1:
            raise ConfigError("k_negatives must lie in [1, batch_size - 1]")


@dataclass
class TrainLog:
    """Per-step scalars plus checkpoint bookkeeping for one training loop."""

    steps: list          # (step, objective, estimate, grad_norm)
    checkpoints: list    # one path per completed epoch (empty without out_dir)
    wall_seconds: float = 0.0

    def objective_series(self) -> np.ndarray:
        return np.array([s[1] for s in self.steps], dtype=np.float64)

    def estimate_series(self) -> np.ndarray:
        return np.array([s[2] for s in self.steps], dtype=np.float64)

    def csv_text(self) -> str:
        return train_log_csv_text(self.steps)


class GroupOptimizer:
    """One Adam instance over several named parameter groups.

    The groups are concatenated into a single flat vector so every group
    shares the same step count and moment buffers.
    """

    def __init__(self, groups: dict, learning_rate: float):
        self.order = list(groups)
        self.layouts = {n: groups[n].layout for n in self.order}
        sizes = [groups[n].size for n in self.order]
        self.splits = np.cumsum(sizes)[:-1]
        layout = {}
        pos = 0
        for name, size in zip(self.order, sizes):
            layout[name] = (pos, (size,))
            pos += size
        self.flat = ParamVector(
            np.concatenate([groups[n].values for n in self.order]), layout)
        self.state = init_adam(self.flat, learning_rate=learning_rate)

    def step(self, grads: dict) -> dict:
        gflat = np.concatenate([np.asarray(grads[n]).ravel() for n in self.order])
        self.flat, self.state = adam_step(self.flat, gflat, self.state)
        parts = np.split(self.flat.values, self.splits)
        return {n: ParamVector(part.copy(), self.layouts[n])
                for n, part in zip(self.order, parts)}


def _grad_norm(arrays) -> float:
    return float(np.sqrt(sum(float(a.ravel() @ a.ravel()) for a in arrays)))


def _check_finite(value: float, arrays, last_checkpoint):
    bad = not np.isfinite(value) or any(not np.all(np.isfinite(a)) for a in arrays)
    if bad:
        raise NumericAbort("non-finite objective or gradient",
                           last_checkpoint=last_checkpoint)


def _batch_reports(tokens: np.ndarray, idx: np.ndarray) -> list:
    return [list(tokens[i]) for i in idx]


@dataclass
class PretrainResult:
    image: ParamVector
    text: ParamVector
    critic: Critic
    log: TrainLog
    log_ema: object = None


def pretrain(dataset: WorldDataset, icfg, tcfg, train: TrainConfig,
             critic_hidden=(64, 32), activation: str = "relu",
             out_dir=None, run_name: str = "pretrain",
             config_hash: str = "") -> PretrainResult:
    """Maximize the chosen MI bound over image/text encoder pairs.

    Ragged tail batches are dropped, so every epoch sees the same number of
    steps. A checkpoint lands after each epoch when out_dir is given; if the
    objective or a gradient goes non-finite the loop aborts and names the
    last completed checkpoint.
    """
    n = dataset.images.shape[0]
    if n < train.batch_size:
        raise ConfigError(f"dataset holds {n} samples, batch needs "
                          f"{train.batch_size}")
    image = init_image_params(icfg, substream(train.seed, "init", "image"))
    text = init_text_params(tcfg, substream(train.seed, "init", "text"))
    image_dim = icfg.grid_width if train.objective == "local" else icfg.global_dim
    critic = init_critic(image_dim, tcfg.text_dim, critic_hidden,
                         substream(train.seed, "init", "critic"), activation)
    opt = GroupOptimizer({"image": image, "text": text, "critic": critic.params},
                         train.learning_rate)
    objective_fn = (local_pipeline_objective if train.objective == "local"
                    else global_pipeline_objective)
    ema_decay = (train.ema_decay
                 if train.ema_correction and train.bound == "mine_dv" else None)
    log_ema = None
    log = TrainLog([], [])
    last_ckpt = None
    step = 0
    t0 = time.perf_counter()
    for epoch in range(train.epochs):
        order = substream(train.seed, "order", epoch).permutation(n)
        neg_rng = substream(train.seed, "negatives", epoch)
        for start in range(0, n - train.batch_size + 1, train.batch_size):
            idx = order[start:start + train.batch_size]
            reports = _batch_reports(dataset.report_tokens, idx)
            try:
                res = objective_fn(dataset.images[idx], reports, icfg, image,
                                   tcfg, text, critic, train.bound,
                                   train.k_negatives, rng=neg_rng,
                                   ema_decay=ema_decay, log_ema=log_ema)
            except NumericError as exc:
                raise NumericAbort(f"encoder overflow: {exc}",
                                   last_checkpoint=last_ckpt) from exc
            grads = (res.image_grad.values, res.text_grad.values,
                     res.critic_grad.values)
            _check_finite(res.value, grads, last_ckpt)
            log_ema = res.log_ema
            # ascend the bound: Adam minimizes, so feed it the negated grads
            new = opt.step({"image": -grads[0], "text": -grads[1],
                            "critic": -grads[2]})
            image, text = new["image"], new["text"]
            critic = replace(critic, params=new["critic"])
            log.steps.append((step, res.value, res.estimate.value_nats,
                              _grad_norm(grads)))
            step += 1
        if out_dir is not None:
            path = os.path.join(out_dir, f"{run_name}-epoch{epoch}.ckpt")
            save_checkpoint(path, {"image": image, "text": text,
                                   "critic": critic.params},
                            config_hash=config_hash, seed=train.seed,
                            extra={"epoch": epoch, "steps_done": step,
                                   "objective": train.objective,
                                   "bound": train.bound})
            log.checkpoints.append(path)
            last_ckpt = path
    log.wall_seconds = time.perf_counter() - t0
    return PretrainResult(image, text, critic, log, log_ema)


# ---------------------------------------------------------------------------
# Downstream probes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    mode: str
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.mode not in PROBE_MODES:
            raise ConfigError(f"probe mode must be one of {PROBE_MODES}")
        if self.batch_size < 2 or self.epochs < 1 or not self.learning_rate > 0:
            raise ConfigError("bad probe settings")


@dataclass
class ProbeResult:
    image: ParamVector
    head: ParamVector
    head_spec: MlpSpec
    log: TrainLog
    frozen_intact: bool


def _bce_loss_and_grad(logits: np.ndarray, labels: np.ndarray):
    """Mean binary cross entropy with logits over every (sample, region)."""
    z, y = logits, labels.astype(np.float64)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    dz = (expit(z) - y) / z.size
    return loss, dz


def train_probe(dataset: WorldDataset, icfg, image: ParamVector,
                probe: ProbeConfig) -> ProbeResult:
    """Fit per-region binary heads on the global image feature.

    frozen: the grid conv stack keeps its pretrained bytes; the global stage
    and the head train. finetune/scratch: everything trains. Freezing works
    by zeroing those gradient slices, which leaves Adam's moments at exactly
    zero so the parameters never move; the byte-level identity is checked at
    the end and reported as `frozen_intact`.
    """
    n, n_regions = dataset.labels.shape
    if n < probe.batch_size:
        raise ConfigError(f"labeled set holds {n} samples, batch needs "
                          f"{probe.batch_size}")
    head_spec = MlpSpec((icfg.global_dim, n_regions))
    head = init_mlp_params(head_spec, substream(probe.seed, "probe", "head"))
    frozen_names = []
    if probe.mode == "frozen":
        frozen_names, _ = freeze_split(image, icfg)
    frozen_slices = [image.segment_slice(name) for name in frozen_names]
    frozen_before = [image.values[sl].tobytes() for sl in frozen_slices]
    opt = GroupOptimizer({"image": image, "head": head}, probe.learning_rate)
    log = TrainLog([], [])
    step = 0
    t0 = time.perf_counter()
    for epoch in range(probe.epochs):
        order = substream(probe.seed, "probe", "order", epoch).permutation(n)
        for start in range(0, n - probe.batch_size + 1, probe.batch_size):
            idx = order[start:start + probe.batch_size]
            labels = dataset.labels[idx]
            try:
                _, gfeat, icache = image_forward(icfg, image,
                                                 dataset.images[idx],
                                                 with_global=True)
                logits, hcache = mlp_forward_cache(head_spec, head, gfeat)
            except NumericError as exc:
                raise NumericAbort(f"probe overflow: {exc}",
                                   last_checkpoint=None) from exc
            loss, dlogits = _bce_loss_and_grad(logits, labels)
            head_grad, d_gfeat = mlp_backward_from_cache(head_spec, head,
                                                         hcache, dlogits)
            image_grad = image_backward(icfg, image, icache, d_global=d_gfeat)
            g_image = image_grad.values
            for sl in frozen_slices:
                g_image[sl] = 0.0
            _check_finite(loss, (g_image, head_grad.values), None)
            new = opt.step({"image": g_image, "head": head_grad.values})
            image, head = new["image"], new["head"]
            log.steps.append((step, loss, 0.0,
                              _grad_norm((g_image, head_grad.values))))
            step += 1
    log.wall_seconds = time.perf_counter() - t0
    frozen_after = [image.values[sl].tobytes() for sl in frozen_slices]
    intact = frozen_before == frozen_after
    if frozen_names and not intact:
        raise NumericAbort("frozen encoder segments changed during probing",
                           last_checkpoint=None)
    return ProbeResult(image, head, head_spec, log, intact)


def evaluate_probe(dataset: WorldDataset, icfg, image: ParamVector,
                   head: ParamVector, head_spec: MlpSpec,
                   batch_size: int = 256) -> np.ndarray:
    """Per-region AUC of the probe head on held-out data."""
    n, n_regions = dataset.labels.shape
    logits = np.empty((n, n_regions))
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        _, gfeat, _ = image_forward(icfg, image, dataset.images[start:stop],
                                    with_global=True)
        logits[start:stop] = mlp_forward_cache(head_spec, head, gfeat)[0]
    return np.array([auc(ScoredLabelSet(logits[:, r], dataset.labels[:, r]))
                     for r in range(n_regions)])


# ---------------------------------------------------------------------------
# Gaussian calibration runs
# ---------------------------------------------------------------------------

@dataclass
class GaussianTrainResult:
    log: TrainLog
    estimates: np.ndarray       # raw per-step estimates in nats
    smoothed: np.ndarray        # trailing window-100 mean of the estimates
    final_smoothed: float
    critic: Critic


def train_gaussian_critic(u: np.ndarray, v: np.ndarray, bound: str, steps: int,
                          batch_size: int, k_negatives: int,
                          learning_rate: float, seed: int,
                          critic_hidden=(64, 32), activation: str = "relu",
                          ema_correction: bool = False,
                          ema_decay: float = 0.99) -> GaussianTrainResult:
    """Train a critic on paired samples and track the bound's estimate."""
    if bound not in BOUNDS:
        raise ConfigError(f"bound must be one of {BOUNDS}")
    n, dim = u.shape
    if not 1 <= k_negatives <= batch_size - 1:
        raise ConfigError("k_negatives must lie in [1, batch_size - 1]")
    critic = init_critic(dim, v.shape[1], critic_hidden,
                         substream(seed, "init", "critic"), activation)
    opt = GroupOptimizer({"critic": critic.params}, learning_rate)
    batch_rng = substream(seed, "batches")
    neg_rng = substream(seed, "negatives")
    dec = ema_decay if ema_correction and bound == "mine_dv" else None
    log_ema = None
    cap = np.log(k_negatives + 1)
    log = TrainLog([], [])
    estimates = np.empty(steps)
    t0 = time.perf_counter()
    for step in range(steps):
        idx = batch_rng.integers(0, n, size=batch_size)
        res = global_objective(u[idx], v[idx], critic, bound, k_negatives,
                               rng=neg_rng, ema_decay=dec, log_ema=log_ema)
        estimate = res.estimate.value_nats
        if bound == "cpc" and estimate > cap + 1e-9:
            raise NumericAbort(f"cpc estimate {estimate} exceeds log(K+1)",
                               last_checkpoint=None)
        _check_finite(res.value, (res.critic_grad.values,), None)
        log_ema = res.log_ema
        new = opt.step({"critic": -res.critic_grad.values})
        critic = replace(critic, params=new["critic"])
        estimates[step] = estimate
        log.steps.append((step, res.value, estimate,
                          _grad_norm((res.critic_grad.values,))))
    log.wall_seconds = time.perf_counter() - t0
    smoothed = moving_average(estimates, 100)
    return GaussianTrainResult(log, estimates, smoothed,
                               float(smoothed[-1]), critic)


# ---------------------------------------------------------------------------
# The experiment matrix
# ---------------------------------------------------------------------------
# Nine arms: {local-mi, global-mi} x {mine_dv, cpc} x {frozen, tuned} plus an
# image-only baseline trained from scratch on the labels for twice the probe
# epochs. Frozen and tuned probes share one pretraining run.

PRETRAIN_FAMILIES = (("local-mi", "mine_dv"), ("local-mi", "cpc"),
                     ("global-mi", "mine_dv"), ("global-mi", "cpc"))
ARM_ROWS = tuple((arm, bnd, mode) for arm, bnd in PRETRAIN_FAMILIES
                 for mode in ("frozen", "tuned")) + (("image-only", "none",
                                                      "scratch"),)


@dataclass
class MatrixSettings:
    """Everything one (family, seed) worker needs, picklable."""

    icfg: object
    tcfg: object
    train: TrainConfig
    probe_epochs: int
    critic_hidden: tuple
    activation: str
    out_dir: object = None
    config_hash: str = ""
    # "auto" keys the negative count to each family's bound; an explicit
    # integer applies to every family unchanged.
    k_negatives_raw: object = "auto"


@dataclass
class ArmOutcome:
    arm: str
    bound: str
    probe_mode: str
    seed: int
    region_aucs: np.ndarray = None
    pretrain_objective: np.ndarray = None
    frozen_intact: bool = True
    error: str = ""


def _family_label(arm: str, bound: str, seed: int) -> str:
    return f"{arm}-{bound}-seed{seed}"


def run_pretrain_family(arm: str, settings: MatrixSettings,
                        train_ds: WorldDataset, labeled: WorldDataset,
                        test_ds: WorldDataset) -> list:
    """Pretrain once, then run the frozen and the tuned probe."""
    train = settings.train
    out = None
    if settings.out_dir is not None:
        out = os.path.join(settings.out_dir,
                           _family_label(arm, train.bound, train.seed))
    objective = "local" if arm == "local-mi" else "global"
    pre = pretrain(train_ds, settings.icfg, settings.tcfg,
                   replace(train, objective=objective),
                   critic_hidden=settings.critic_hidden,
                   activation=settings.activation, out_dir=out,
                   config_hash=settings.config_hash)
    if out is not None:
        write_text_file(os.path.join(out, "pretrain_log.csv"),
                        pre.log.csv_text())
    outcomes = []
    for mode in ("frozen", "tuned"):
        probe = ProbeConfig(mode="frozen" if mode == "frozen" else "finetune",
                            epochs=settings.probe_epochs,
                            batch_size=train.batch_size,
                            learning_rate=train.learning_rate, seed=train.seed)
        fitted = train_probe(labeled, settings.icfg, pre.image.copy(), probe)
        aucs = evaluate_probe(test_ds, settings.icfg, fitted.image, fitted.head,
                              fitted.head_spec)
        if out is not None:
            write_text_file(os.path.join(out, f"probe_{mode}_log.csv"),
                            fitted.log.csv_text())
        outcomes.append(ArmOutcome(arm, train.bound, mode, train.seed,
                                   region_aucs=aucs,
                                   pretrain_objective=pre.log.objective_series(),
                                   frozen_intact=fitted.frozen_intact))
    return outcomes


def run_scratch_baseline(settings: MatrixSettings, labeled: WorldDataset,
                         test_ds: WorldDataset) -> ArmOutcome:
    """Label-supervised encoder from random init, twice the probe epochs."""
    train = settings.train
    image = init_image_params(settings.icfg,
                              substream(train.seed, "init", "image"))
    probe = ProbeConfig(mode="scratch", epochs=2 * settings.probe_epochs,
                        batch_size=train.batch_size,
                        learning_rate=train.learning_rate, seed=train.seed)
    fitted = train_probe(labeled, settings.icfg, image, probe)
    aucs = evaluate_probe(test_ds, settings.icfg, fitted.image, fitted.head,
                          fitted.head_spec)
    if settings.out_dir is not None:
        out = os.path.join(settings.out_dir,
                           f"image-only-seed{train.seed}")
        write_text_file(os.path.join(out, "probe_scratch_log.csv"),
                        fitted.log.csv_text())
    return ArmOutcome("image-only", "none", "scratch", train.seed,
                      region_aucs=aucs)


def _matrix_unit(args):
    """One parallelizable work item; returns ArmOutcome list."""
    kind, arm, settings, train_ds, labeled, test_ds = args
    try:
        if kind == "family":
            return run_pretrain_family(arm, settings, train_ds, labeled, test_ds)
        return [run_scratch_baseline(settings, labeled, test_ds)]
    except Exception as exc:  # record, let the other arms proceed
        bound = settings.train.bound if kind == "family" else "none"
        modes = ("frozen", "tuned") if kind == "family" else ("scratch",)
        label = arm if kind == "family" else "image-only"
        return [ArmOutcome(label, bound, mode, settings.train.seed,
                           error=f"{type(exc).__name__}: {exc}")
                for mode in modes]


@dataclass
class MatrixResult:
    table: ResultsTable
    outcomes: list
    failures: list      # (arm, bound, probe_mode, seed, message)
    wall_seconds: float


def run_experiment_matrix(world, datasets: dict, settings_base: MatrixSettings,
                          seeds, threads: int = 1) -> MatrixResult:
    """Run all nine arms across seeds and aggregate per-region AUCs.

    datasets maps seed -> (train, labeled, test). Worker failures are
    recorded and the remaining arms still run; an arm only reaches the table
    with the seeds that finished.
    """
    t0 = time.perf_counter()
    units = []
    for seed in seeds:
        train_ds, labeled, test_ds = datasets[seed]
        per_seed = replace(settings_base,
                           train=replace(settings_base.train, seed=seed))
        for arm, bound in PRETRAIN_FAMILIES:
            k = resolve_k_negatives(settings_base.k_negatives_raw, bound,
                                    per_seed.train.batch_size)
            st = replace(per_seed, train=replace(per_seed.train, bound=bound,
                                                 k_negatives=k))
            units.append(("family", arm, st, train_ds, labeled, test_ds))
        units.append(("scratch", "image-only", per_seed, train_ds, labeled,
                      test_ds))
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            nested = list(pool.map(_matrix_unit, units))
    else:
        nested = [_matrix_unit(u) for u in units]
    outcomes = [o for batch in nested for o in batch]

    by_arm = {}
    failures = []
    for o in outcomes:
        if o.error:
            failures.append((o.arm, o.bound, o.probe_mode, o.seed, o.error))
        else:
            by_arm.setdefault((o.arm, o.bound, o.probe_mode), []).append(o)
    table = ResultsTable()
    n_regions = world.config.n_regions
    for key in ARM_ROWS:
        arms = sorted(by_arm.get(key, []), key=lambda o: o.seed)
        if not arms:
            continue
        stacked = np.stack([o.region_aucs for o in arms])  # (n_seeds, R)
        for r in range(n_regions):
            table.add(key[0], key[1], key[2], f"region-{r}", stacked[:, r])
        table.add(key[0], key[1], key[2], "overall", stacked.mean(axis=1))
    return MatrixResult(table, outcomes, failures,
                        time.perf_counter() - t0)


def build_matrix_datasets(world, seeds, n_train: int, n_test: int,
                          n_labeled: int) -> dict:
    """Per-seed (train, labeled, test) splits; arms share them within a seed."""
    if not 1 <= n_labeled <= n_train:
        raise ConfigError("n_labeled must lie in [1, n_train]")
    datasets = {}
    for seed in seeds:
        train_ds = generate_dataset(world, n_train,
                                    substream(seed, "data", "train"))
        test_ds = generate_dataset(world, n_test,
                                   substream(seed, "data", "test"))
        labeled = train_ds.subset(np.arange(n_labeled))
        datasets[seed] = (train_ds, labeled, test_ds)
    return datasets
