"""Command line entry points.

Workflow: `limi gen-data` writes the dataset pair plus the oracle per-region
MI table, `limi pretrain` and `limi probe` run one arm by hand, `limi matrix`
runs all nine arms across seeds, `limi estimate-mi` calibrates the bounds on
correlated Gaussians, and `limi report` collects everything into tables and
figures. Exit codes: 0 success, 2 configuration problems, 3 missing or
malformed files, 4 numeric failures, 1 anything else.
"""

import argparse
import hashlib
import os
import sys

import numpy as np

from .config import (gaussian_config, image_encoder_config, load_config,
                     parse_config_text, resolve_k_negatives,
                     text_encoder_config, world_config)
from .dataio import (load_checkpoint, load_dataset, region_mi_csv_text,
                     save_dataset, write_text_file)
from .encoders import freeze_split, init_image_params
from .errors import (ConfigError, DataFormatError, LimiError, NumericAbort,
                     NumericError, StateSpaceError)
from .evaluation import ResultsTable
from .report import write_report
from .seeding import substream
from .trainer import (MatrixSettings, ProbeConfig, TrainConfig,
                      build_matrix_datasets, evaluate_probe, pretrain,
                      run_experiment_matrix, train_gaussian_critic,
                      train_probe)
from .world import gaussian_pairs, generate_dataset, region_information, sample_world


def _load_cfg(args):
    cfg = load_config(args.config) if args.config else parse_config_text("")
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates[("train", "seed")] = args.seed
    if getattr(args, "out", None) is not None:
        updates[("output", "dir")] = args.out
    return cfg.with_updates(updates) if updates else cfg


def _train_config(cfg) -> TrainConfig:
    t = cfg.values["train"]
    k = resolve_k_negatives(t["k_negatives"], t["bound"], t["batch_size"])
    return TrainConfig(objective=t["objective"], bound=t["bound"],
                       batch_size=t["batch_size"], epochs=t["epochs_pretrain"],
                       learning_rate=t["learning_rate"], seed=t["seed"],
                       ema_correction=t["ema_correction"],
                       ema_decay=t["ema_decay"], k_negatives=k)


def _threads() -> int:
    raw = os.environ.get("LIMI_THREADS", "1")
    try:
        val = int(raw)
    except ValueError:
        raise ConfigError(f"LIMI_THREADS must be an integer, got {raw!r}") from None
    if val < 1:
        raise ConfigError("LIMI_THREADS must be at least 1")
    return val


def _sampled_world(cfg):
    seed = cfg.get("train", "seed")
    return sample_world(world_config(cfg), substream(seed, "world"))


def _run_name(cfg) -> str:
    return f"{cfg.get('train', 'objective')}-{cfg.get('train', 'bound')}"


def _check_world_hash(ds, world, path):
    if ds.world_hash != world.world_hash():
        raise DataFormatError(
            f"{path} was generated under a different world (hash "
            f"{ds.world_hash}, config implies {world.world_hash()})")


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = cfg.get("output", "dir")
    seed = cfg.get("train", "seed")
    world = _sampled_world(cfg)
    n_train = cfg.get("data", "n_train")
    n_test = cfg.get("data", "n_test")
    train_ds = generate_dataset(world, n_train, substream(seed, "data", "train"))
    test_ds = generate_dataset(world, n_test, substream(seed, "data", "test"))
    save_dataset(os.path.join(out, "data", "train.bin"), train_ds, seed)
    save_dataset(os.path.join(out, "data", "test.bin"), test_ds, seed)
    info = region_information(world)
    write_text_file(os.path.join(out, "data", "region_mi.csv"),
                    region_mi_csv_text(info, world.config.n_regions))
    write_text_file(os.path.join(out, "config.cfg"), cfg.canonical_text())
    print(f"world {world.world_hash()}: {world.config.n_regions} regions, "
          f"{n_train} train / {n_test} test samples")
    print(f"per-region MI (nats): patch {info.patch_hidden_nats:.4f}, "
          f"sentence {info.sentence_hidden_nats:.4f}, "
          f"patch-sentence {info.patch_sentence_nats:.4f}")
    return 0


def cmd_estimate_mi(args) -> int:
    cfg = _load_cfg(args)
    out = cfg.get("output", "dir")
    seed = cfg.get("train", "seed")
    g = cfg.values["gaussian"]
    gcfg = gaussian_config(cfg)
    u, v, true_mi = gaussian_pairs(gcfg, substream(seed, "gaussian-data"))
    bound = cfg.get("train", "bound")
    res = train_gaussian_critic(
        u, v, bound, steps=g["steps"], batch_size=g["batch_size"],
        k_negatives=g["k_negatives"], learning_rate=g["learning_rate"],
        seed=seed, critic_hidden=tuple(g["critic_hidden"]),
        activation=cfg.get("encoder", "activation"),
        ema_correction=cfg.get("train", "ema_correction"),
        ema_decay=cfg.get("train", "ema_decay"))
    write_text_file(os.path.join(out, "estimate", "estimate_log.csv"),
                    res.log.csv_text())
    summary = ("bound,dim,steps,batch_size,k_negatives,true_mi_nats,"
               "final_estimate,final_smoothed\n"
               f"{bound},{gcfg.dim},{g['steps']},{g['batch_size']},"
               f"{g['k_negatives']},{float(true_mi)!r},"
               f"{float(res.estimates[-1])!r},{res.final_smoothed!r}\n")
    write_text_file(os.path.join(out, "estimate", "estimate_summary.csv"),
                    summary)
    print(f"{bound} on {gcfg.dim}-d Gaussian pairs, true MI {true_mi:.4f} nats")
    print(f"final estimate {res.estimates[-1]:.4f}, "
          f"window-100 mean {res.final_smoothed:.4f} "
          f"({res.log.wall_seconds:.1f}s)")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    out = cfg.get("output", "dir")
    train_path = os.path.join(out, "data", "train.bin")
    ds, _ = load_dataset(train_path)
    world = _sampled_world(cfg)
    _check_world_hash(ds, world, train_path)
    train = _train_config(cfg)
    run_name = _run_name(cfg)
    res = pretrain(ds, image_encoder_config(cfg), text_encoder_config(cfg),
                   train, critic_hidden=tuple(cfg.get("encoder", "critic_hidden")),
                   activation=cfg.get("encoder", "activation"),
                   out_dir=os.path.join(out, "pretrain"), run_name=run_name,
                   config_hash=cfg.config_hash())
    write_text_file(os.path.join(out, "pretrain", f"{run_name}_log.csv"),
                    res.log.csv_text())
    series = res.log.objective_series()
    print(f"{run_name}: {len(res.log.steps)} steps, objective "
          f"{series[0]:.4f} -> {series[-1]:.4f} ({res.log.wall_seconds:.1f}s)")
    print(f"checkpoints: {', '.join(res.log.checkpoints)}")
    return 0


def _probe_labels(arm: str, cfg) -> tuple:
    if arm == "scratch":
        return ("image-only", "none", "scratch")
    obj = cfg.get("train", "objective")
    mode = "frozen" if arm == "frozen" else "tuned"
    return (f"{obj}-mi", cfg.get("train", "bound"), mode)


def cmd_probe(args) -> int:
    cfg = _load_cfg(args)
    out = cfg.get("output", "dir")
    world = _sampled_world(cfg)
    icfg = image_encoder_config(cfg)
    train_path = os.path.join(out, "data", "train.bin")
    test_path = os.path.join(out, "data", "test.bin")
    train_ds, _ = load_dataset(train_path)
    test_ds, _ = load_dataset(test_path)
    _check_world_hash(train_ds, world, train_path)
    _check_world_hash(test_ds, world, test_path)
    n_labeled = cfg.get("data", "n_labeled")
    if n_labeled > train_ds.images.shape[0]:
        raise ConfigError("n_labeled exceeds the stored training set")
    labeled = train_ds.subset(np.arange(n_labeled))
    seed = cfg.get("train", "seed")
    epochs = cfg.get("train", "epochs_probe")
    if args.arm == "scratch":
        image = init_image_params(icfg, substream(seed, "init", "image"))
        epochs *= 2
    else:
        last = cfg.get("train", "epochs_pretrain") - 1
        ckpt = os.path.join(out, "pretrain",
                            f"{_run_name(cfg)}-epoch{last}.ckpt")
        groups, header = load_checkpoint(ckpt)
        if header["config_hash"] != cfg.config_hash():
            raise DataFormatError(
                f"{ckpt} was trained under a different config")
        image = groups["image"]
    probe = ProbeConfig(mode=args.arm, epochs=epochs,
                        batch_size=cfg.get("train", "batch_size"),
                        learning_rate=cfg.get("train", "learning_rate"),
                        seed=seed)
    res = train_probe(labeled, icfg, image, probe)
    aucs = evaluate_probe(test_ds, icfg, res.image, res.head, res.head_spec)
    arm, bound, mode = _probe_labels(args.arm, cfg)
    table = ResultsTable()
    for r in range(aucs.size):
        table.add(arm, bound, mode, f"region-{r}", [aucs[r]])
    table.add(arm, bound, mode, "overall", [aucs.mean()])
    probe_dir = os.path.join(out, "probe", args.arm)
    write_text_file(os.path.join(probe_dir, "auc.csv"), table.to_csv_text())
    write_text_file(os.path.join(probe_dir, "probe_log.csv"),
                    res.log.csv_text())
    print(table.render_text(), end="")
    if args.arm == "frozen":
        frozen_names, _ = freeze_split(res.image, icfg)
        blob = b"".join(res.image.values[res.image.segment_slice(n)].tobytes()
                        for n in frozen_names)
        digest = hashlib.sha256(blob).hexdigest()[:16]
        print(f"frozen segments intact: {res.frozen_intact} (sha256 {digest})")
    return 0


def cmd_matrix(args) -> int:
    cfg = _load_cfg(args)
    out = cfg.get("output", "dir")
    world = _sampled_world(cfg)
    seeds = list(cfg.get("output", "seeds"))
    datasets = build_matrix_datasets(world, seeds,
                                     n_train=cfg.get("data", "n_train"),
                                     n_test=cfg.get("data", "n_test"),
                                     n_labeled=cfg.get("data", "n_labeled"))
    settings = MatrixSettings(
        icfg=image_encoder_config(cfg), tcfg=text_encoder_config(cfg),
        train=_train_config(cfg),
        probe_epochs=cfg.get("train", "epochs_probe"),
        critic_hidden=tuple(cfg.get("encoder", "critic_hidden")),
        activation=cfg.get("encoder", "activation"),
        out_dir=os.path.join(out, "matrix"), config_hash=cfg.config_hash(),
        k_negatives_raw=cfg.get("train", "k_negatives"))
    res = run_experiment_matrix(world, datasets, settings, seeds,
                                threads=_threads())
    write_text_file(os.path.join(out, "results.csv"), res.table.to_csv_text())
    write_text_file(os.path.join(out, "config.cfg"), cfg.canonical_text())
    marker = os.path.join(out, "matrix_failures.txt")
    if res.failures:
        lines = sorted(f"{arm}/{bound}/{mode} seed {seed}: {msg}"
                       for arm, bound, mode, seed, msg in res.failures)
        write_text_file(marker, "\n".join(lines) + "\n")
    elif os.path.exists(marker):
        os.remove(marker)
    print(res.table.render_text(), end="")
    print(f"matrix wall time {res.wall_seconds:.1f}s, "
          f"{len(res.failures)} failed arm runs")
    for arm, bound, mode, seed, msg in res.failures:
        print(f"  failed: {arm}/{bound}/{mode} seed {seed}: {msg}",
              file=sys.stderr)
    return 0 if not res.failures else 1


def cmd_report(args) -> int:
    cfg = _load_cfg(args)
    out = cfg.get("output", "dir")
    seeds = list(cfg.get("output", "seeds"))
    status = write_report(out, seeds)
    if not status.complete:
        print("report blocked, missing runs:", file=sys.stderr)
        for item in status.missing:
            print(f"  {item}", file=sys.stderr)
        return 3
    for path in status.written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "estimate-mi": cmd_estimate_mi,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "matrix": cmd_matrix,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="limi",
        description="Local mutual information pretraining experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
            ("gen-data", "sample a world and write train/test datasets"),
            ("estimate-mi", "train a critic on Gaussian pairs with known MI"),
            ("pretrain", "run one MI pretraining arm on the stored dataset"),
            ("probe", "fit and evaluate a downstream probe"),
            ("matrix", "run all arms across seeds and write results.csv"),
            ("report", "collect a finished run into tables and figures")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", default=None,
                       help="config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=None,
                       help="override [train] seed")
        p.add_argument("--out", default=None, help="override [output] dir")
        if name == "probe":
            p.add_argument("--arm", required=True,
                           choices=("frozen", "finetune", "scratch"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, StateSpaceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NumericAbort, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except LimiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
