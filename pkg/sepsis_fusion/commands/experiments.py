import logging

import click

from sepsis_fusion.commands import experiment_config, output_dir, publish
from sepsis_fusion.errors import ConfigError
from sepsis_fusion.harness import (
    Variant, run_ablation, run_calibration_study, sample_size_sweep, train_variant,
)
from sepsis_fusion.reporting import emit_report

logger = logging.getLogger(__name__)


# Train logic
@click.command(help="Train one variant on one seed and write its model bundle.")
@click.argument("variant", type=click.Choice([v.value for v in Variant], case_sensitive=False))
@click.pass_obj
def train(state, variant):
    config = experiment_config(state)
    seed = config.seeds[0]
    out = output_dir(state, config)
    report, bundle = train_variant(config, variant.upper(), seed, out)
    emit_report(report, config.formats, out)
    click.echo(str(bundle))


# Ablation logic
@click.command(help="Run every configured variant on every seed and report the comparison.")
@click.pass_obj
def ablate(state):
    config = experiment_config(state)
    publish(state, run_ablation(config, state.threads), config)


# Sweep logic
@click.command(help="Compare variants across ascending cohort sizes.")
@click.option("--sizes", default=None, help="Comma-separated ascending sizes; defaults to the config's.")
@click.pass_obj
def sweep(state, sizes):
    config = experiment_config(state)
    if sizes is not None:
        try:
            sizes = tuple(int(part) for part in sizes.split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"--sizes must be comma-separated integers, got {sizes!r}") from None
    publish(state, sample_size_sweep(config, sizes, state.threads), config)


# Calibration logic
@click.command(help="Calibrate the ensemble's threshold to a target sensitivity.")
@click.option("--target", type=click.FloatRange(0.0, 1.0), default=None,
              help="Target sensitivity; defaults to the config's.")
@click.pass_obj
def calibrate(state, target):
    config = experiment_config(state)
    publish(state, run_calibration_study(config, target, state.threads), config)
