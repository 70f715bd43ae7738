"""``seda`` command-line entry point.

    seda generate --config smoke --out runs/data
    seda train    --config smoke --data runs/data --out runs/ckpt
    seda eval     --config smoke --ckpt runs/ckpt/last.ckpt --data runs/data --report runs/report.json
    seda baseline --config smoke --data runs/data/train.emb runs/data/test.emb
    seda sample   --ckpt runs/ckpt/last.ckpt --data runs/data/test.emb --out runs/aligned.emb
    seda plot     --report runs/report.json --out runs/plots

``--config`` takes a YAML path or the name of a bundled config
(``smoke``, ``hard``). Usage errors exit 2, configuration errors exit 1 and
name the offending key, any other failure exits 1 with a one-line message.
"""

import argparse
import logging
import os
import sys

import torch

from . import __version__
from .config import bundled_configs, load_config
from .data import generate_synthetic, read_dataset, write_dataset
from .evalkit import EvaluationReport, evaluate, plot_report, run_baseline_onestep, run_visual_baseline
from .exceptions import ConfigError
from .sampler import SamplingOptions, reverse_chain
from .trainer import ABLATIONS, fit, init_run, load_checkpoint

log = logging.getLogger("seda")


class _UsageError(Exception):
    pass


def _dataset_path(path, split):
    """``path`` itself, or ``path/<split>.emb`` when it is a directory."""
    if os.path.isdir(path):
        path = os.path.join(path, f"{split}.emb")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    return path


def _pick(flag, config, key, name):
    value = flag if flag is not None else config.paths.get(key)
    if value is None:
        raise _UsageError(f"{name} is required (flag or paths.{key} in the config)")
    return value


def _eval_generator(seed):
    return torch.Generator().manual_seed(int(seed) + 1)


def cmd_generate(args):
    config = load_config(args.config, args.seed)
    out = _pick(args.out, config, "out", "--out")
    train, test = generate_synthetic(config.synthetic_spec())
    os.makedirs(out, exist_ok=True)
    write_dataset(os.path.join(out, "train.emb"), train)
    write_dataset(os.path.join(out, "test.emb"), test)
    print(f"wrote {len(train)} train and {len(test)} test rows to {out}")


def cmd_train(args):
    config = load_config(args.config, args.seed)
    data = _dataset_path(_pick(args.data, config, "data", "--data"), "train")
    out = _pick(args.out, config, "out", "--out")
    train_set = read_dataset(data)
    train_config = config.train_config(args.ablation)
    model, generator = init_run(train_config, train_set, **config.denoiser_kwargs())
    result = fit(model, train_set, train_config, checkpoint_dir=out, generator=generator, resume_from=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"trained {train_config.model_kind} model for {len(result.history)} epochs; "
          f"final loss {last.get('total', float('nan')):.4f}; checkpoints in {out}")


def cmd_eval(args):
    config = load_config(args.config, args.seed)
    ckpt = load_checkpoint(_pick(args.ckpt, config, "ckpt", "--ckpt"))
    test_set = read_dataset(_dataset_path(_pick(args.data, config, "data", "--data"), "test"))
    report_path = _pick(args.report, config, "report", "--report")
    meta = {"config_fingerprint": ckpt.fingerprint, "seed": config.seed, "epoch": ckpt.epoch}
    report = evaluate(
        ckpt.build_model(), ckpt.noise_schedule(), test_set,
        config.sampling_options(), _eval_generator(config.seed), metadata=meta,
    )
    report.save(report_path)
    print(" ".join(f"{k}={v:.4f}" for k, v in sorted(report.metrics.items())))


def cmd_baseline(args):
    config = load_config(args.config, args.seed)
    paths = args.data or [config.paths.get("data")]
    if paths == [None]:
        raise _UsageError("--data is required (flag or paths.data in the config)")
    if len(paths) == 1:
        train_path, test_path = _dataset_path(paths[0], "train"), _dataset_path(paths[0], "test")
    elif len(paths) == 2:
        train_path, test_path = _dataset_path(paths[0], "train"), _dataset_path(paths[1], "test")
    else:
        raise _UsageError("--data takes a dataset directory or a train file and a test file")
    train_set, test_set = read_dataset(train_path), read_dataset(test_path)
    runner = run_baseline_onestep if args.kind == "onestep" else run_visual_baseline
    report = runner(train_set, test_set, config.train_config(), config.denoiser_kwargs())
    if args.report:
        report.save(args.report)
    print(" ".join(f"{k}={v:.4f}" for k, v in sorted(report.metrics.items())))


def cmd_sample(args):
    ckpt = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    options = SamplingOptions(noise_scale=args.noise_scale, stride=args.stride)
    if args.config is not None:
        config = load_config(args.config, args.seed)
        options, seed = config.sampling_options(), config.seed
    else:
        seed = args.seed if args.seed is not None else int(ckpt.config.get("seed", 0))
    model = ckpt.build_model()
    visual = torch.from_numpy(dataset.visual)
    if model.kind == "seda":
        features = reverse_chain(model, ckpt.noise_schedule(), visual, _eval_generator(seed), options).features
    else:
        with torch.no_grad():
            features = model(visual)
    aligned = type(dataset)(features.numpy().astype("float32"), None, dataset.labels, dataset.num_classes, "test")
    write_dataset(args.out, aligned.validate())
    print(f"wrote {len(aligned)} aligned rows to {args.out}")


def cmd_plot(args):
    written = plot_report(EvaluationReport.load(args.report), args.out)
    print(f"wrote {len(written)} figures to {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="seda", description="Diffusion-based visual-to-textual feature alignment.")
    parser.add_argument("--version", action="version", version=f"seda {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    bundled = ", ".join(bundled_configs())

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    def config_flag(p, required=True):
        p.add_argument("--config", required=required, help=f"YAML run config path or bundled name ({bundled})")

    def seed_flag(p):
        p.add_argument("--seed", type=int, help="overrides SEDA_SEED and the config seed")

    p = add("generate", cmd_generate, "Generate a synthetic paired dataset (DIR/train.emb, DIR/test.emb).")
    config_flag(p)
    p.add_argument("--out", help="output directory")
    seed_flag(p)

    p = add("train", cmd_train, "Train a model and write per-epoch checkpoints.")
    config_flag(p)
    p.add_argument("--data", help="train dataset file or a directory holding train.emb")
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--ablation", choices=sorted(ABLATIONS), help="component switches: base, T, TI or TIL")
    p.add_argument("--resume", help="checkpoint to continue training from")
    seed_flag(p)

    p = add("eval", cmd_eval, "Evaluate a checkpoint on a test dataset and write a report.")
    config_flag(p)
    p.add_argument("--ckpt", help="checkpoint file")
    p.add_argument("--data", help="test dataset file or a directory holding test.emb")
    p.add_argument("--report", help="report output path (JSON)")
    seed_flag(p)

    p = add("baseline", cmd_baseline, "Train and evaluate a non-diffusion baseline.")
    config_flag(p)
    p.add_argument("--data", nargs="+", help="dataset directory, or a train file and a test file")
    p.add_argument("--kind", choices=("onestep", "visual"), default="onestep",
                   help="one-step projector (default) or raw-visual head")
    p.add_argument("--report", help="optional report output path (JSON)")
    seed_flag(p)

    p = add("sample", cmd_sample, "Run the reverse chain and write aligned features as a dataset.")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset whose visual features are aligned")
    p.add_argument("--out", required=True, help="output dataset file")
    config_flag(p, required=False)
    p.add_argument("--noise-scale", type=float, default=1.0, help="noise multiplier when no config is given")
    p.add_argument("--stride", type=int, default=1, help="step stride when no config is given")
    seed_flag(p)

    p = add("plot", cmd_plot, "Render confusion, trajectory and projection figures from a report.")
    p.add_argument("--report", required=True, help="report file")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def run_command(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except _UsageError as exc:
        parser.error(str(exc))
    except ConfigError as exc:
        print(f"seda: config error [{exc.key}]: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 -- every failure becomes one diagnostic line
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"seda {args.command}: error: {message}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
