import click

from sepsis_fusion import init_store
from sepsis_fusion.commands import output_dir
from sepsis_fusion.reporting import FORMATS, emit_report, load_stored_reports


# Report logic
@click.command(help="Re-emit report files from a stored run (the latest one by default).")
@click.option("--run-id", type=int, default=None, help="Stored run id.")
@click.option("--experiment", default=None, help="Latest run of this experiment name.")
@click.option("--format", "formats", type=click.Choice(FORMATS), multiple=True,
              help="Formats to write; all of them when omitted.")
@click.pass_obj
def report(state, run_id, experiment, formats):
    init_store(state.database_url)
    out = output_dir(state)
    for stored in load_stored_reports(run_id=run_id, experiment=experiment):
        for path in emit_report(stored, formats or FORMATS, out):
            click.echo(str(path))
