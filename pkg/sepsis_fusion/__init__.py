from sqlite3 import Connection as SQLite3Connection
from sqlalchemy.orm import DeclarativeBase, sessionmaker
from sqlalchemy import create_engine, event
from sqlalchemy.engine import Engine
from dotenv import load_dotenv
import logging
import click

load_dotenv()

from sepsis_fusion.config import Config  # noqa: E402
from sepsis_fusion.errors import ConfigError, SepsisFusionError  # noqa: E402

__version__ = "1.0.0"

logger = logging.getLogger(__name__)


class Base(DeclarativeBase):
    pass


Session = sessionmaker(expire_on_commit=False)


@event.listens_for(Engine, "connect")
def set_sqlite_pragma(dbapi_connection, connection_record):
    if isinstance(dbapi_connection, SQLite3Connection):
        cursor = dbapi_connection.cursor()
        cursor.execute("PRAGMA foreign_keys=ON;")
        cursor.close()


def init_store(url=None):
    """Bind the session factory to the results database and create its tables."""
    from sepsis_fusion import models  # noqa: F401

    engine = create_engine(url or Config.DATABASE_URL)
    Session.configure(bind=engine)
    Base.metadata.create_all(engine)
    return engine


def create_cli():
    from sepsis_fusion.commands import CliState
    from sepsis_fusion.commands.data import synth, guard
    from sepsis_fusion.commands.experiments import train, ablate, sweep, calibrate
    from sepsis_fusion.commands.report import report

    @click.group(help="Multimodal sepsis fusion experiments on synthetic cohorts.")
    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                  help="Experiment config (JSON, ExperimentConfig field names).")
    @click.option("--seed", type=int, default=None, help="Override the config seed list.")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                  help="Output directory.")
    @click.option("--threads", type=click.IntRange(min=1), default=None,
                  help="Parallelism width (default SEPSIS_FUSION_THREADS or 1); never affects results.")
    @click.option("--log-level", default=Config.LOG_LEVEL, show_default=True)
    @click.option("--database-url", default=None, help="Results store URL.")
    @click.version_option(__version__)
    @click.pass_context
    def cli(ctx, config_path, seed, out_dir, threads, log_level, database_url):
        logging.basicConfig(level=log_level.upper(), format=Config.LOG_FORMAT, force=True)
        ctx.obj = CliState(
            config_path=config_path,
            seed=seed,
            out_dir=out_dir,
            threads=threads if threads is not None else Config.threads(),
            database_url=database_url or Config.DATABASE_URL,
        )

    cli.add_command(synth)
    cli.add_command(guard)
    cli.add_command(train)
    cli.add_command(ablate)
    cli.add_command(sweep)
    cli.add_command(calibrate)
    cli.add_command(report)

    return cli


def main(argv=None):
    """Run the CLI and map failures to exit codes (1 config/usage, 2 runtime)."""
    cli = create_cli()
    try:
        result = cli.main(args=argv, prog_name="sepsis-fusion", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    except SepsisFusionError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except Exception as exc:
        logger.exception("unhandled failure")
        click.echo(f"error: {exc}", err=True)
        return 2
    return result if isinstance(result, int) else 0
