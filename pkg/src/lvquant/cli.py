"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O or file-format
error, 3 numeric failure (NaN metric or gradient-check breach).
"""
from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import data as D
from .errors import ConfigError, FormatError, LabelError
from .evaluate import REFERENCE_PHASE_ER, cross_validate, evaluate
from .gradcheck import check_model, check_ops
from .model import ModelConfig, Network
from .phantom import generate_phantom
from .train import TrainConfig, fit, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

KAPPA = click.Choice(["1", "3", "5", "7"])


class NumericFailure(Exception):
    pass


def _training_options(fn):
    options = [
        click.option("--kappa", type=KAPPA, default="5", show_default=True, help="Slices per window."),
        click.option("--epochs", type=click.IntRange(min=0), default=100, show_default=True,
                     help="Training epochs (free choice, no published value)."),
        click.option("--lr", type=click.FloatRange(min=0, min_open=True), default=1e-4, show_default=True),
        click.option("--momentum", type=click.FloatRange(0, 1, max_open=True), default=0.5, show_default=True),
        click.option("--lambda", "lam", type=click.FloatRange(min=0), default=0.005, show_default=True,
                     help="L2 weight on the squared weights."),
        click.option("--batch", type=click.IntRange(min=1), default=20, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True, help="Init and shuffle seed."),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


def _load(path) -> list[D.CardiacSequence]:
    seqs = D.load_dataset(path)
    if not seqs:
        raise ConfigError(f"{path} contains no subjects")
    return seqs


def _emit(text: str, path) -> None:
    if path is None:
        click.echo(text, nl=False)
    else:
        Path(path).write_text(text)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Spatio-temporal CNN for left-ventricle quantification."""


@cli.command()
@click.option("--subjects", type=click.IntRange(min=1), default=145, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def phantom(subjects, seed, out):
    """Write an LVQD file of synthetic subjects."""
    D.save_dataset(generate_phantom(seed, subjects), out)
    click.echo(f"wrote {subjects} subjects to {out}")


@cli.command()
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@_training_options
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Checkpoint path.")
@click.option("--resume", type=click.Path(dir_okay=False), default=None,
              help="Continue from a checkpoint's saved epoch.")
def train(data, kappa, epochs, lr, momentum, lam, batch, seed, out, resume):
    """Train on an LVQD file and write an LVQC checkpoint."""
    kappa = int(kappa)
    cfg = TrainConfig(learning_rate=lr, momentum=momentum, lam=lam, batch_size=batch, epochs=epochs, seed=seed)
    windows = D.WindowSet(_load(data), kappa)
    if resume:
        ckpt = load_checkpoint(resume)
        if ckpt.model_config.kappa != kappa:
            raise ConfigError(f"checkpoint kappa {ckpt.model_config.kappa} != --kappa {kappa}")
        net, opt, start = ckpt.network(), ckpt.optimizer(), ckpt.epoch
    else:
        net, opt, start = Network(ModelConfig(kappa=kappa, seed=seed)), None, 0

    def report(stats):
        if not np.isfinite(stats.loss):
            raise NumericFailure(f"non-finite loss at epoch {stats.epoch}")
        click.echo(stats.line())

    opt, _ = fit(windows, net, cfg, opt, start, report)
    save_checkpoint(out, net, opt, cfg, epoch=max(epochs, start))
    click.echo(f"saved checkpoint to {out}")


@cli.command("eval")
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--ckpt", type=click.Path(dir_okay=False), required=True)
@click.option("--kappa", type=KAPPA, default=None, help="Must match the checkpoint if given.")
@click.option("--report", type=click.Path(dir_okay=False), default=None, help="Defaults to stdout.")
def eval_cmd(data, ckpt, kappa, report):
    """Evaluate a checkpoint on an LVQD file."""
    net = load_checkpoint(ckpt).network()
    result = evaluate(net, _load(data), None if kappa is None else int(kappa))
    _emit(result.to_text(f"eval kappa={net.config.kappa}"), report)
    if result.has_undefined():
        raise NumericFailure("report contains undefined metrics")


@cli.command()
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--folds", type=click.Choice(["3", "5", "7"]), default="5", show_default=True)
@_training_options
@click.option("--split-seed", type=int, default=0, show_default=True)
@click.option("--report", type=click.Path(dir_okay=False), default=None)
def crossval(data, folds, kappa, epochs, lr, momentum, lam, batch, seed, split_seed, report):
    """Subject-level k-fold cross-validation."""
    kappa = int(kappa)
    cfg = TrainConfig(learning_rate=lr, momentum=momentum, lam=lam, batch_size=batch, epochs=epochs, seed=seed)
    result = cross_validate(
        _load(data), ModelConfig(kappa=kappa, seed=seed), cfg, int(folds), split_seed,
        on_fold=lambda j, r: click.echo(f"fold {j}: phase_er={r.phase_er:.3f}", err=True),
    )
    text = result.to_text()
    ref = REFERENCE_PHASE_ER.get(kappa)
    if ref is not None:
        text += f"# reference phase ER on the challenge data at kappa={kappa}: {ref}%\n"
    _emit(text, report)
    if any(r.has_undefined() for r in result.reports):
        raise NumericFailure("a fold report contains undefined metrics")


@cli.command()
@click.option("--scope", type=click.Choice(["ops", "model"]), default="ops", show_default=True)
@click.option("--dtype", type=click.Choice(["double"]), default="double", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def gradcheck(scope, dtype, seed):
    """Compare analytic gradients with central differences."""
    results = check_ops(seed) if scope == "ops" else check_model(seed=seed)
    for r in results:
        click.echo(r.line())
    if not all(r.passed for r in results):
        raise NumericFailure("gradient check threshold exceeded")


@cli.command()
@click.option("--ckpt", type=click.Path(dir_okay=False), default=None)
@click.option("--data", type=click.Path(dir_okay=False), default=None)
def inspect(ckpt, data):
    """Describe a checkpoint's architecture or a dataset's header."""
    if (ckpt is None) == (data is None):
        raise click.UsageError("give exactly one of --ckpt or --data")
    if ckpt is not None:
        c = load_checkpoint(ckpt)
        net = c.network()
        click.echo(net.arch.describe())
        click.echo(f"parameters: {net.arch.parameter_count()}")
        click.echo(f"epoch: {c.epoch}")
    else:
        header = D.read_header(data)
        for k, v in header.items():
            click.echo(f"{k}: {v}")
        click.echo(f"subject_count: {header['subjects']}")


def main(argv=None) -> int:
    try:
        result = cli.main(args=argv, prog_name="lvquant", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except (FormatError, LabelError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_IO
    except (NumericFailure, ArithmeticError, FloatingPointError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_NUMERIC
    return result if isinstance(result, int) else EXIT_OK


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
