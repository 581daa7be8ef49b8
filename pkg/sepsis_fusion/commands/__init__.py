from dataclasses import dataclass, replace
from pathlib import Path
import logging

import click

from sepsis_fusion import init_store
from sepsis_fusion.config import Config
from sepsis_fusion.errors import ConfigError
from sepsis_fusion.harness import load_experiment_config
from sepsis_fusion.reporting import emit_report, store_report

logger = logging.getLogger(__name__)


@dataclass
class CliState:
    config_path: str | None = None
    seed: int | None = None
    out_dir: str | None = None
    threads: int = 1
    database_url: str = Config.DATABASE_URL


def experiment_config(state):
    """The --config experiment with the global --seed applied."""
    if state.config_path is None:
        raise ConfigError("this command needs --config")
    config = load_experiment_config(state.config_path)
    if state.seed is not None:
        config = replace(config, seeds=(state.seed,))
    return config


def output_dir(state, config=None):
    if state.out_dir is not None:
        return Path(state.out_dir)
    if config is not None and config.output_dir is not None:
        return Path(config.output_dir)
    return Path(Config.OUTPUT_DIR)


def publish(state, report, config):
    """Record the run in the results store, then write its report files."""
    init_store(state.database_url)
    run_id = store_report(report, config.to_dict())
    written = emit_report(report, config.formats, output_dir(state, config))
    logger.info("run %d: wrote %d files", run_id, len(written))
    for path in written:
        click.echo(str(path))
    for note in report.notes:
        click.echo(note, err=True)
    return run_id
