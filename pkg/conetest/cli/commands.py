import json
import logging

import click

from config import Config
from conetest.cli.report import (
    render_json,
    render_text,
    render_weights_json,
    render_weights_text,
)
from conetest.cli.run_config import parse_config
from conetest.errors import ConetestError, FimUnavailableError, ValidationError
from conetest.inference.chibarsq import (
    draw_sample,
    estimate_weights,
    exact_weights,
    pvalue_from_weights,
)
from conetest.inference.cone import Cone
from conetest.inference.coverage import COVERAGE_MODES, CoverageConfig, run_coverage_study
from conetest.inference.engine import parse_fit_summary, var_comp_test
from conetest.inference.fim import EXTRACTED, FimEstimate, load_fim, validate_fim_matrix
from conetest.models.dataset import load_csv
from conetest.models.mixed_model import FitOptions, fit_ml
from conetest.models.structure import cone_dims

logger = logging.getLogger(__name__)

VALIDATION_EXIT = 2
NUMERICAL_EXIT = 3


class CommandError(click.ClickException):
    """ClickException carrying the exit code of the error family"""

    def __init__(self, message, exit_code):
        super().__init__(message)
        self.exit_code = exit_code


def fail(e):
    logger.error(f"{type(e).__name__}: {e}")
    code = VALIDATION_EXIT if isinstance(e, ValidationError) else NUMERICAL_EXIT
    raise CommandError(str(e), code)


def test_options(func):
    """Flags shared by the commands that run a test"""
    options = [
        click.option("--config", "config_path", type=click.Path(), help="Run configuration file"),
        click.option("--pval", type=click.Choice(["bounds", "approx", "both"]), help="p-values to compute"),
        click.option("--fim", help="extract, compute, or the path of a FIM file"),
        click.option("--fim-inverse/--no-fim-inverse", default=None, help="FIM file holds the inverse information"),
        click.option("--M", "M", type=click.IntRange(min=1), help="Monte Carlo sample size"),
        click.option("--B", "B", type=click.IntRange(min=1), help="Bootstrap sample size"),
        click.option("--seed", type=click.IntRange(min=0), envvar="CONETEST_SEED", help="Random seed"),
        click.option("--workers", type=click.IntRange(min=1), help="Worker threads"),
        click.option("--format", "output_format", type=click.Choice(["text", "json"]), help="Report format"),
        click.option("--summary/--short", "summary", default=None, help="Full or short text report"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _overrides(**values):
    aliases = {"output_format": "format"}
    return {aliases.get(key, key): value for key, value in values.items()}


def _emit(result, rc):
    if rc.format == "json":
        click.echo(render_json(result), nl=False)
    else:
        click.echo(render_text(result, full=rc.summary), nl=False)


@click.group()
@click.option("--log-level", default=None, help="Logging level (default from CONETEST_LOG_LEVEL)")
def cli(log_level):
    """Likelihood ratio tests of variance components in mixed-effects models"""
    logging.basicConfig(level=(log_level or Config.LOG_LEVEL).upper(), format=Config.LOG_FORMAT)


@cli.command()
@click.option("--data", type=click.Path(), help="CSV data file (overrides the config)")
@test_options
def test(data, config_path, pval, fim, fim_inverse, M, B, seed, workers, output_format, summary):
    """Fit both models to a dataset and test the variance components"""
    try:
        rc = parse_config(
            config_path,
            "test",
            _overrides(data=data, pval=pval, fim=fim, fim_inverse=fim_inverse, M=M, B=B,
                       seed=seed, workers=workers, output_format=output_format, summary=summary),
        )
        roles, spec1, spec0 = rc.model_specs()
        ds = load_csv(rc.data, roles)
        opts = FitOptions(seed=rc.seed)
        logger.info(f"Fitting alternative model ({spec1.n_params} parameters)")
        fit1 = fit_ml(spec1, ds, opts=opts)
        logger.info(f"Fitting null model ({spec0.n_params} parameters)")
        fit0 = fit_ml(spec0, ds, opts=opts)
        result = var_comp_test(fit1, fit0, rc.options(), data=ds)
    except ConetestError as e:
        fail(e)
    _emit(result, rc)


@cli.command("test-summary")
@click.option("--m1", type=click.Path(), help="Fit summary of the alternative model")
@click.option("--m0", type=click.Path(), help="Fit summary of the null model")
@test_options
def test_summary(m1, m0, config_path, pval, fim, fim_inverse, M, B, seed, workers, output_format, summary):
    """Test variance components from two fit summaries"""
    try:
        rc = parse_config(
            config_path,
            "test-summary",
            _overrides(m1=m1, m0=m0, pval=pval, fim=fim, fim_inverse=fim_inverse, M=M, B=B,
                       seed=seed, workers=workers, output_format=output_format, summary=summary),
        )
        result = var_comp_test(parse_fit_summary(rc.m1), parse_fit_summary(rc.m0), rc.options())
    except ConetestError as e:
        fail(e)
    _emit(result, rc)


@cli.command()
@click.option("--m1", type=click.Path(), help="Fit summary describing the tested parameters")
@click.option("--lrt", type=click.FloatRange(min=0), help="Also report the p-value at this statistic")
@test_options
def weights(m1, lrt, config_path, pval, fim, fim_inverse, M, B, seed, workers, output_format, summary):
    """Chi-bar-square weights for a test structure and a FIM"""
    try:
        rc = parse_config(
            config_path,
            "weights",
            _overrides(m1=m1, fim=fim, fim_inverse=fim_inverse, M=M, seed=seed, workers=workers,
                       output_format=output_format),
        )
        fit_summary = parse_fit_summary(rc.m1)
        structure = fit_summary.structure
        if structure is None:
            raise ValidationError(f"{rc.m1} does not describe the tested parameters")
        dims = cone_dims(structure)
        cone = Cone.from_structure(structure)
        estimate = exact_weights(cone, dims)
        if estimate is None:
            if rc.fim in ("extract", "compute"):
                if rc.fim == "compute" or fit_summary.fim is None:
                    raise FimUnavailableError("weights need a FIM file or a fim in the summary")
                matrix = validate_fim_matrix(fit_summary.fim, structure.q, f"fim of {rc.m1}")
                information = FimEstimate(matrix, EXTRACTED, is_inverse=fit_summary.fim_is_inverse)
            else:
                information = load_fim(rc.fim, structure.q, is_inverse=rc.fim_inverse)
            sample = draw_sample(cone, information.to_V(), rc.M, rc.seed, workers=rc.workers)
            estimate = estimate_weights(sample, dims)
        pvalue = pvalue_from_weights(estimate, lrt) if lrt is not None else None
    except ConetestError as e:
        fail(e)
    render = render_weights_json if rc.format == "json" else render_weights_text
    click.echo(render(dims, estimate, pvalue, lrt), nl=False)


@cli.command()
@click.option("--R", "R", type=click.IntRange(min=1), default=200, show_default=True, help="Repetitions")
@click.option("--n", type=click.IntRange(min=2), default=100, show_default=True, help="Individuals per dataset")
@click.option("--timepoints", type=click.IntRange(min=2), default=20, show_default=True)
@click.option("--B", "B", type=click.IntRange(min=50), default=100, show_default=True, help="Bootstrap size")
@click.option("--sigma", type=float, default=1.2, show_default=True, help="Residual standard deviation")
@click.option("--mode", "modes", type=click.Choice(COVERAGE_MODES), multiple=True, help="FIM modes (default all)")
@click.option("--seed", type=click.IntRange(min=0), envvar="CONETEST_SEED", default=Config.SEED)
@click.option("--workers", type=click.IntRange(min=1), default=Config.WORKERS)
@click.option("--format", "output_format", type=click.Choice(["text", "json"]), default="text")
def coverage(R, n, timepoints, B, sigma, modes, seed, workers, output_format):
    """Coverage of 95% intervals built from extracted and bootstrap FIMs"""
    try:
        config = CoverageConfig(
            sigma=sigma, n=n, timepoints=timepoints, R=R, B=B,
            modes=tuple(modes) or COVERAGE_MODES, seed=seed, workers=workers,
        )
        result = run_coverage_study(config)
    except ConetestError as e:
        fail(e)
    if output_format == "json":
        click.echo(json.dumps(result.to_dict(), sort_keys=True, indent=2))
    else:
        click.echo(result.table())
