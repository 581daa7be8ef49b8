import logging

import click

from sepsis_fusion.cohort import load_cohort, save_cohort
from sepsis_fusion.guards import GuardSettings, apply_guards
from sepsis_fusion.synthgen import generate_cohort, load_genspec

logger = logging.getLogger(__name__)


# Synth logic
@click.command(help="Generate a synthetic cohort file from a GenSpec file or preset.")
@click.argument("genspec")
@click.option("-n", "--size", type=click.IntRange(min=0), required=True, help="Number of records.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True, help="Cohort JSONL path.")
@click.pass_obj
def synth(state, genspec, size, output):
    spec = load_genspec(genspec)
    seed = state.seed if state.seed is not None else 0
    cohort = generate_cohort(spec, size, seed)
    save_cohort(cohort, output)
    click.echo(f"wrote {len(cohort)} records to {output}")


# Guard logic
@click.command(help="Apply the observation window, temporal firewall and lexical mask to a cohort file.")
@click.argument("cohort_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--task", type=click.Choice(["detection", "mortality", "antibiotic"]), required=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True, help="Guarded cohort path.")
@click.option("--buffer-hours", type=float, default=4.0, show_default=True)
@click.option("--drug-lexicon", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--pathogen-lexicon", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--mortality-horizon", type=float, default=24.0, show_default=True)
@click.pass_obj
def guard(state, cohort_path, task, output, buffer_hours, drug_lexicon, pathogen_lexicon, mortality_horizon):
    settings = GuardSettings(
        buffer_hours=buffer_hours,
        drug_lexicon=drug_lexicon,
        pathogen_lexicon=pathogen_lexicon,
        seed=state.seed if state.seed is not None else 0,
        mortality_horizon=mortality_horizon,
    )
    guarded, audit = apply_guards(load_cohort(cohort_path), task, settings)
    save_cohort(guarded, output)
    click.echo(
        f"kept {len(guarded)} records; purged {audit.notes_purged} notes, masked {audit.tokens_masked} tokens, "
        f"excluded {audit.records_excluded} records"
    )
