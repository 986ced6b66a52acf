"""
Grouped longitudinal datasets

- Loads delimited text files with pandas and groups rows by individual
- Expands categorical columns into 0/1 indicators against a reference level
- Builds per-individual fixed (X_i) and random (Z_i) design matrices from term lists
"""

import logging
import re
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd

from conetest.errors import ConfigurationError, DataParseError, ValidationError

logger = logging.getLogger(__name__)

INTERCEPT = "1"


@dataclass(frozen=True)
class ColumnRoles:
    """Which columns of a file play which part in the model"""

    group: str
    response: str
    covariates: tuple = ()
    categorical: dict = field(default_factory=dict)  # column -> reference level


@dataclass(frozen=True)
class IndividualData:
    id: str
    responses: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        responses = np.asarray(self.responses, dtype=float)
        covariates = np.asarray(self.covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates.reshape(len(responses), -1)
        if len(responses) < 1:
            raise ValidationError(f"Individual {self.id} has no observations")
        if covariates.shape[0] != len(responses):
            raise ValidationError(
                f"Individual {self.id}: {len(responses)} responses but "
                f"{covariates.shape[0]} covariate rows"
            )
        if not (np.all(np.isfinite(responses)) and np.all(np.isfinite(covariates))):
            raise ValidationError(f"Individual {self.id} has non-finite values")
        object.__setattr__(self, "responses", responses)
        object.__setattr__(self, "covariates", covariates)

    @property
    def n_obs(self):
        return len(self.responses)


@dataclass(frozen=True)
class Dataset:
    individuals: tuple
    column_names: tuple
    # Source column -> design columns it expands to (categoricals only)
    expansions: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "individuals", tuple(self.individuals))
        object.__setattr__(self, "column_names", tuple(self.column_names))
        if not self.individuals:
            raise ValidationError("Dataset has no individuals")
        ids = [ind.id for ind in self.individuals]
        if len(set(ids)) != len(ids):
            raise ValidationError("Individual identifiers are not unique")
        for ind in self.individuals:
            if ind.covariates.shape[1] != len(self.column_names):
                raise ValidationError(
                    f"Individual {ind.id} exposes {ind.covariates.shape[1]} covariate "
                    f"columns, expected {len(self.column_names)}"
                )

    @property
    def n_individuals(self):
        return len(self.individuals)

    @property
    def n_observations(self):
        return sum(ind.n_obs for ind in self.individuals)

    def column_index(self, name):
        try:
            return self.column_names.index(name)
        except ValueError:
            raise ConfigurationError(f"Unknown column: {name}") from None

    def with_responses(self, responses):
        """Copy of the dataset with new response vectors, covariates shared"""
        if len(responses) != self.n_individuals:
            raise ValidationError("One response vector per individual is required")
        individuals = [
            IndividualData(id=ind.id, responses=y, covariates=ind.covariates)
            for ind, y in zip(self.individuals, responses)
        ]
        return Dataset(individuals, self.column_names, dict(self.expansions))

    def stacked(self):
        """All rows in load order: (responses, covariates)"""
        y = np.concatenate([ind.responses for ind in self.individuals])
        x = np.vstack([ind.covariates for ind in self.individuals])
        return y, x


class DesignPair(NamedTuple):
    X: np.ndarray
    Z: np.ndarray


def parse_terms(formula):
    """
    Split a term list like "1 + Sex + age + Sex:age" into terms

    Returns:
        list: Terms in declaration order, interactions written "a:b"
    """
    if formula is None:
        return []
    formula = formula.strip()
    if not formula or formula == "0":
        return []
    terms = []
    for raw in formula.split("+"):
        term = re.sub(r"\s+", "", raw)
        if not term:
            raise ConfigurationError(f"Empty term in formula: {formula!r}")
        if term in terms:
            raise ConfigurationError(f"Duplicate term {term!r} in formula")
        terms.append(term)
    return terms


def parse_random(formula):
    """
    Parse "1 + age | Subject" into (terms, group column)

    Returns:
        tuple: (list of terms, group name or None)
    """
    if formula is None or not formula.strip():
        return [], None
    if "|" in formula:
        lhs, group = formula.split("|", 1)
        return parse_terms(lhs), group.strip() or None
    return parse_terms(formula), None


def term_columns(terms):
    """Source columns referenced by a list of terms (intercept excluded)"""
    columns = []
    for term in terms:
        if term == INTERCEPT:
            continue
        for part in term.split(":"):
            if part not in columns:
                columns.append(part)
    return columns


def _indicator_name(column, level, n_levels):
    # A two-level factor keeps its own name so formulas can say "Sex"
    return column if n_levels == 1 else f"{column}[{level}]"


def load_csv(path, roles):
    """
    Load a grouped longitudinal dataset from a comma-separated file

    Args:
        path (str): CSV file with a header row
        roles (ColumnRoles): Group, response, covariate and categorical columns

    Returns:
        Dataset: Individuals in order of first appearance, rows in file order
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise ConfigurationError(f"Data file not found: {path}") from None
    except pd.errors.EmptyDataError:
        raise DataParseError(f"Data file is empty: {path}") from None

    frame.columns = [c.strip() for c in frame.columns]
    covariates = list(roles.covariates)
    for column in roles.categorical:
        if column not in covariates:
            covariates.append(column)

    missing = [
        c for c in [roles.group, roles.response] + covariates if c not in frame.columns
    ]
    if missing:
        raise ConfigurationError(f"Columns not found in {path}: {', '.join(missing)}")
    if frame.empty:
        raise DataParseError(f"Data file has no rows: {path}")

    frame = frame.apply(lambda col: col.str.strip())

    def numeric(column):
        values = pd.to_numeric(frame[column], errors="coerce")
        bad = np.flatnonzero(~np.isfinite(values.to_numpy(dtype=float)))
        if len(bad):
            row = int(bad[0])
            raise DataParseError(
                f"non-numeric or missing value {frame[column].iloc[row]!r} "
                f"in column {column}",
                row=row,
            )
        return values.to_numpy(dtype=float)

    responses = numeric(roles.response)

    design_columns = []
    expansions = {}
    blocks = []
    for column in covariates:
        if column in roles.categorical:
            reference = roles.categorical[column]
            values = frame[column]
            if (values == "").any():
                row = int(np.flatnonzero((values == "").to_numpy())[0])
                raise DataParseError(f"missing value in column {column}", row=row)
            levels = sorted(values.unique())
            if reference not in levels:
                raise ConfigurationError(
                    f"Reference level {reference!r} not present in column {column}"
                )
            others = [level for level in levels if level != reference]
            names = [_indicator_name(column, level, len(others)) for level in others]
            expansions[column] = tuple(names)
            for level in others:
                blocks.append((values == level).to_numpy(dtype=float))
            design_columns.extend(names)
        else:
            blocks.append(numeric(column))
            design_columns.append(column)

    matrix = np.column_stack(blocks) if blocks else np.zeros((len(frame), 0))

    groups = frame[roles.group]
    if (groups == "").any():
        row = int(np.flatnonzero((groups == "").to_numpy())[0])
        raise DataParseError(f"empty group identifier in column {roles.group}", row=row)

    individuals = []
    group_values = groups.to_numpy()
    for gid in pd.unique(group_values):
        index = np.flatnonzero(group_values == gid)
        individuals.append(
            IndividualData(id=str(gid), responses=responses[index], covariates=matrix[index])
        )

    logger.info(
        f"Loaded {len(frame)} rows for {len(individuals)} individuals from {path}"
    )
    return Dataset(individuals, design_columns, expansions)


def _term_design(ds, term):
    """Column names and per-row extractor for one term"""
    if term == INTERCEPT:
        return [INTERCEPT], None
    parts = term.split(":")
    if len(parts) > 2:
        raise ConfigurationError(f"Only two-way interactions are supported: {term}")
    expanded = []
    for part in parts:
        if part in ds.expansions:
            expanded.append(list(ds.expansions[part]))
        elif part in ds.column_names:
            expanded.append([part])
        else:
            raise ConfigurationError(f"Unknown column in term {term!r}: {part}")
    if len(expanded) == 1:
        names = [(c,) for c in expanded[0]]
    else:
        names = [(a, b) for a in expanded[0] for b in expanded[1]]
    indices = [tuple(ds.column_index(c) for c in combo) for combo in names]
    return [":".join(combo) for combo in names], indices


def design_columns(ds, terms, intercept_first=True):
    """Names of the design columns a term list produces, in matrix order"""
    ordered = _order_terms(terms, intercept_first)
    names = []
    for term in ordered:
        names.extend(_term_design(ds, term)[0])
    return names


def _order_terms(terms, intercept_first):
    terms = list(terms)
    if intercept_first and INTERCEPT in terms:
        terms.remove(INTERCEPT)
        terms.insert(0, INTERCEPT)
    return terms


def _build(ds, terms, intercept_first):
    specs = [_term_design(ds, term) for term in _order_terms(terms, intercept_first)]
    matrices = []
    for ind in ds.individuals:
        cols = []
        for _, indices in specs:
            if indices is None:
                cols.append(np.ones(ind.n_obs))
                continue
            for combo in indices:
                col = ind.covariates[:, combo[0]].copy()
                for extra in combo[1:]:
                    col = col * ind.covariates[:, extra]
                cols.append(col)
        matrices.append(np.column_stack(cols) if cols else np.zeros((ind.n_obs, 0)))
    return matrices


def design_matrices(ds, fixed_terms, random_terms):
    """
    Per-individual fixed and random design matrices

    Fixed columns put the intercept first and keep the declaration order for
    the other terms; random columns keep the declaration order exactly, since
    it defines the covariance block layout.

    Returns:
        list: One DesignPair(X, Z) per individual, in dataset order
    """
    xs = _build(ds, fixed_terms, intercept_first=True)
    zs = _build(ds, random_terms, intercept_first=False)
    return [DesignPair(X=x, Z=z) for x, z in zip(xs, zs)]
