"""
Run configuration for the command line

Values come from command-line flags, then the configuration file, then the
environment defaults in config.Config.
"""

import logging
import os
from dataclasses import dataclass, field, fields as dataclass_fields, replace

from dotenv import dotenv_values
from marshmallow import ValidationError as SchemaValidationError

from config import Config
from conetest.errors import ConfigurationError
from conetest.inference.engine import TestOptions
from conetest.models.dataset import ColumnRoles, parse_random, parse_terms, term_columns
from conetest.models.mixed_model import CovarianceLayout, LmmSpec
from conetest.schemas.config_schema import RunConfigSchema

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("test", "test-summary", "weights", "coverage")
FIM_SOURCES = ("extract", "compute")


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    data: str = None
    response: str = None
    group: str = None
    categorical: dict = field(default_factory=dict)
    fixed: str = None
    random: str = None
    gamma: str = "full"
    blocks: tuple = None
    null_fixed: str = None
    null_random: str = None
    null_gamma: str = None
    null_blocks: tuple = None
    m1: str = None
    m0: str = None
    pval: str = "bounds"
    fim: str = "extract"
    fim_inverse: bool = False
    M: int = Config.MONTE_CARLO_SIZE
    B: int = Config.BOOTSTRAP_SIZE
    seed: int = Config.SEED
    workers: int = Config.WORKERS
    format: str = "text"
    summary: bool = True

    def __post_init__(self):
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigurationError(f"Unknown subcommand: {self.subcommand}")

    def validate(self):
        """Check that the inputs the subcommand needs are present"""
        if self.subcommand == "test":
            required = {"data": self.data, "response": self.response, "fixed": self.fixed,
                        "random": self.random, "null_random": self.null_random}
        elif self.subcommand == "test-summary":
            required = {"m1": self.m1, "m0": self.m0}
        elif self.subcommand == "weights":
            required = {"m1": self.m1}
        else:
            required = {}
        missing = [key for key, value in required.items() if value is None]
        if missing:
            raise ConfigurationError(
                f"{self.subcommand} needs {', '.join(missing)} (flag or config key)"
            )
        return self

    def options(self):
        if self.fim in FIM_SOURCES:
            fim_mode, fim_path = self.fim, None
        else:
            fim_mode, fim_path = "file", self.fim
        return TestOptions(
            pval_mode=self.pval,
            fim_mode=fim_mode,
            fim_path=fim_path,
            fim_is_inverse=self.fim_inverse,
            M=self.M,
            B=self.B,
            seed=self.seed,
            workers=self.workers,
        )

    def model_specs(self):
        """(ColumnRoles, alternative LmmSpec, null LmmSpec)"""
        fixed = parse_terms(self.fixed)
        random, group = parse_random(self.random)
        group = group or self.group
        if not group:
            raise ConfigurationError("No grouping column: write random as 'terms | group' or set group")
        null_fixed = fixed if self.null_fixed is None else parse_terms(self.null_fixed)
        null_random, null_group = parse_random(self.null_random)
        if null_group and null_group != group:
            raise ConfigurationError(
                f"Null model groups by {null_group}, alternative by {group}"
            )

        spec1 = LmmSpec(tuple(fixed), tuple(random), _layout(len(random), self.gamma, self.blocks), group)
        spec0 = LmmSpec(
            tuple(null_fixed),
            tuple(null_random),
            _layout(len(null_random), self.null_gamma or self.gamma, self.null_blocks),
            group,
        )
        categorical = dict(self.categorical or {})
        columns = term_columns(fixed + random + null_fixed + null_random)
        roles = ColumnRoles(
            group=group,
            response=self.response,
            covariates=tuple(c for c in columns if c not in categorical),
            categorical=categorical,
        )
        return roles, spec1, spec0


def _layout(p, gamma, blocks):
    if blocks is not None:
        if sum(blocks) != p:
            raise ConfigurationError(f"Block sizes {list(blocks)} do not add up to {p} random terms")
        return CovarianceLayout(tuple(blocks))
    return CovarianceLayout.diagonal(p) if gamma == "diag" else CovarianceLayout.full(p)


def _resolve_path(path, config_dir):
    """Paths in a config file are tried as given, next to the file, then in DATA_DIR"""
    if path is None or os.path.isabs(path) or os.path.exists(path):
        return path
    for base in (config_dir, Config.DATA_DIR):
        candidate = os.path.join(base, path) if base else None
        if candidate and os.path.exists(candidate):
            return candidate
    return path


def parse_config(path, subcommand="test", overrides=None):
    """
    Build a RunConfig from a dotenv-format file and flag overrides

    Args:
        path (str, optional): Configuration file; None uses flags and defaults only
        subcommand (str): One of test, test-summary, weights, coverage
        overrides (dict, optional): Flag values; None entries are ignored

    Raises:
        ConfigurationError: Unknown keys, invalid values or missing inputs
    """
    values = {}
    config_dir = None
    if path is not None:
        if not os.path.exists(path):
            raise ConfigurationError(f"Config file not found: {path}")
        raw = {key: value for key, value in dotenv_values(path).items() if value is not None}
        try:
            values = RunConfigSchema().load(raw)
        except SchemaValidationError as e:
            unknown = sorted(k for k, v in e.messages.items() if v == ["Unknown field."])
            if unknown:
                raise ConfigurationError(
                    f"Unknown keys in {path}: {', '.join(unknown)}"
                ) from None
            details = "; ".join(f"{k}: {' '.join(map(str, v))}" for k, v in e.messages.items())
            raise ConfigurationError(f"Invalid config {path}: {details}") from None
        config_dir = os.path.dirname(os.path.abspath(path))
        logger.info(f"Loaded run configuration from {path}")

    known = {f.name for f in dataclass_fields(RunConfig)}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ConfigurationError(f"Unknown option: {key}")
        values[key] = value

    for key in ("data", "m1", "m0"):
        if key in values:
            values[key] = _resolve_path(values[key], config_dir)
    if values.get("fim") not in (None,) + FIM_SOURCES:
        values["fim"] = _resolve_path(values["fim"], config_dir)

    config = RunConfig(subcommand=subcommand)
    return replace(config, **values).validate()
