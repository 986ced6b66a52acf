"""
Variance-components likelihood ratio tests

var_comp_test takes two nested models, either fitted here (FitResult) or
fitted elsewhere and described by a FitSummary, and returns the LRT
statistic with its chi-bar-square p-value, weights and bounds.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from marshmallow import ValidationError as SchemaValidationError

from conetest.errors import (
    FimUnavailableError,
    NumericalError,
    SummaryError,
    ValidationError,
)
from conetest.inference.chibarsq import (
    draw_sample,
    estimate_weights,
    exact_weights,
    pvalue_bounds,
    pvalue_from_sample,
    pvalue_from_weights,
)
from conetest.inference.cone import Cone
from conetest.inference.fim import (
    EXTRACTED,
    FimEstimate,
    bootstrap_fim,
    extract_fim,
    load_fim,
    validate_fim_matrix,
)
from conetest.models.dataset import INTERCEPT
from conetest.models.mixed_model import FitResult
from conetest.models.structure import (
    COVARIANCES_ONLY,
    FULL,
    SUBBLOCK,
    cone_dims,
    infer_test,
)
from conetest.schemas.summary_schema import FitSummarySchema

logger = logging.getLogger(__name__)

PVAL_MODES = ("bounds", "approx", "both")
FIM_MODES = ("extract", "compute", "file")
LRT_TOLERANCE = 1e-6


@dataclass(frozen=True)
class FitSummary:
    loglik: float
    structure: object = None
    theta: np.ndarray = None
    fim: np.ndarray = None
    fim_is_inverse: bool = False
    lrt_override: float = None
    fixed_names: tuple = None
    block_terms: tuple = None
    source: str = None

    def __post_init__(self):
        if self.structure is None:
            if self.theta is not None or self.fim is not None:
                raise SummaryError(
                    "theta and fim need the test structure (fixed, blocks)", paths=["fixed"]
                )
            return
        q = self.structure.q
        if self.theta is not None:
            theta = np.asarray(self.theta, dtype=float)
            if len(theta) != q:
                raise SummaryError(f"theta has {len(theta)} entries, structure implies q={q}", paths=["theta"])
            object.__setattr__(self, "theta", theta)
        if self.fim is not None:
            fim = np.asarray(self.fim, dtype=float)
            if fim.shape != (q, q):
                raise SummaryError(f"fim is {fim.shape[0]}x{fim.shape[1]}, structure implies q={q}", paths=["fim"])
            object.__setattr__(self, "fim", fim)


@dataclass(frozen=True)
class TestOptions:
    pval_mode: str = "bounds"
    fim_mode: str = "extract"
    fim_path: str = None
    fim_is_inverse: bool = False
    M: int = 5000
    B: int = 1000
    seed: int = 0
    workers: int = 1

    __test__ = False

    def __post_init__(self):
        if self.pval_mode not in PVAL_MODES:
            raise ValidationError(f"pval must be one of {', '.join(PVAL_MODES)}, got {self.pval_mode}")
        if self.fim_mode not in FIM_MODES:
            raise ValidationError(f"fim must be one of {', '.join(FIM_MODES)}, got {self.fim_mode}")
        if self.fim_mode == "file" and not self.fim_path:
            raise ValidationError("fim mode 'file' needs a path")
        if self.M < 1 or self.B < 1 or self.workers < 1 or self.seed < 0:
            raise ValidationError("M, B and workers must be positive and seed non-negative")


@dataclass(frozen=True)
class PValues:
    lower_bound: float
    upper_bound: float
    from_weights: float = None
    from_sample: float = None


@dataclass(frozen=True)
class TestResult:
    lrt: float
    dims: object
    pvalues: PValues
    weights: object = None
    fim: FimEstimate = None
    warnings: tuple = field(default=())
    tested_description: str = ""
    null_description: str = ""
    alternative_description: str = ""
    pval_mode: str = "bounds"
    M: int = None
    seed: int = None

    __test__ = False


def parse_fit_summary(path):
    """
    Load a fit summary from JSON

    Raises:
        SummaryError: Schema violations, with the dotted paths of the bad fields
    """
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise SummaryError(f"Fit summary not found: {path}") from None
    except json.JSONDecodeError as e:
        raise SummaryError(f"Fit summary {path} is not valid JSON: {e}") from None

    try:
        data = FitSummarySchema().load(raw)
    except SchemaValidationError as e:
        paths = _flatten_paths(e.messages)
        raise SummaryError(
            f"Invalid fit summary {path}: "
            + "; ".join(f"{p}: {m}" for p, m in paths),
            paths=[p for p, _ in paths],
        ) from None

    return FitSummary(
        loglik=data["loglik"],
        structure=data["structure"],
        theta=data["theta"],
        fim=data["fim"],
        fim_is_inverse=data["fim_is_inverse"],
        lrt_override=data["lrt_override"],
        fixed_names=tuple(data["fixed_names"]) if data["fixed_names"] else None,
        block_terms=tuple(data["block_terms"]) if data["block_terms"] else None,
        source=str(path),
    )


def _flatten_paths(messages, prefix=""):
    """Marshmallow error dict -> [(dotted path, message)]"""
    if isinstance(messages, dict):
        out = []
        for key, value in messages.items():
            path = f"{prefix}.{key}" if prefix else str(key)
            out.extend(_flatten_paths(value, path))
        return out
    if isinstance(messages, list) and all(isinstance(m, str) for m in messages):
        return [(prefix or "_schema", " ".join(messages))]
    return [(prefix or "_schema", str(messages))]


def _join(names):
    names = list(names)
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def _display(term):
    return "Intercept" if term == INTERCEPT else term


def describe_test(structure, fixed_names=None, block_terms=None):
    """
    Sentence naming the tested parameters, and the two hypotheses

    Returns:
        tuple: (tested sentence, null description, alternative description)
    """
    if fixed_names is None:
        fixed_names = [f"beta{k + 1}" for k in range(structure.b)]
    fixed_names = [_display(name) for name in fixed_names]
    if block_terms is None:
        block_terms, start = [], 0
        for r in structure.layout.blocks:
            block_terms.append(tuple(f"b{start + i + 1}" for i in range(r)))
            start += r
    block_terms = [tuple(_display(term) for term in terms) for terms in block_terms]

    variances, covariances = [], []
    for test, terms in zip(structure.block_tests, block_terms):
        r = len(terms)
        if test.kind == FULL:
            variances.extend(terms)
            covariances.extend((terms[j], terms[i]) for i in range(r) for j in range(i))
        elif test.kind == SUBBLOCK:
            u = r - test.s
            variances.extend(terms[u:])
            covariances.extend((terms[j], terms[i]) for i in range(u, r) for j in range(i))
        elif test.kind == COVARIANCES_ONLY:
            part_of = []
            for part, size in enumerate(test.effective_partition(r)):
                part_of.extend([part] * size)
            covariances.extend(
                (terms[j], terms[i])
                for i in range(r)
                for j in range(i)
                if part_of[i] != part_of[j]
            )
    fixed = [fixed_names[k] for k in structure.tested_fixed]

    parts = []
    if variances:
        parts.append(f"{'variances' if len(variances) > 1 else 'variance'} of {_join(variances)}")
    if not variances and covariances:
        pairs = [f"({a}, {b})" for a, b in covariances]
        parts.append(f"{'covariances' if len(pairs) > 1 else 'covariance'} of {_join(pairs)}")
    if fixed:
        parts.append(f"{'fixed effects' if len(fixed) > 1 else 'fixed effect'} of {_join(fixed)}")
    plural = len(variances) + (0 if variances else len(covariances)) + len(fixed) > 1
    sentence = f"Testing that {' and '.join(parts)} {'are' if plural else 'is'} null"

    null = [f"var({v}) = 0" for v in variances]
    null += [f"cov({a},{b}) = 0" for a, b in covariances]
    null += [f"beta({f}) = 0" for f in fixed]
    alternative = [f"var({v}) > 0" for v in variances]
    alternative += [f"cov({a},{b}) != 0" for a, b in covariances if not variances]
    alternative += [f"beta({f}) != 0" for f in fixed]
    return sentence, ", ".join(null), " or ".join(alternative)


def _model_kind(m1, m0):
    if isinstance(m1, FitResult) and isinstance(m0, FitResult):
        return "fit"
    if isinstance(m1, FitSummary) and isinstance(m0, FitSummary):
        return "summary"
    raise ValidationError(
        "Both models must be fitted by conetest or both given as fit summaries"
    )


def _lrt(m1, m0, warnings):
    override = getattr(m1, "lrt_override", None)
    if override is None:
        override = getattr(m0, "lrt_override", None)
    if override is not None:
        message = f"LRT taken from lrt_override ({override:.7g}) instead of the log-likelihoods"
        logger.warning(message)
        warnings.append(message)
        lrt = float(override)
    else:
        lrt = 2.0 * (m1.loglik - m0.loglik)

    if lrt < 0:
        if lrt < -LRT_TOLERANCE:
            raise NumericalError(
                f"LRT statistic is negative ({lrt:.6g}): the null fit is better than the "
                "alternative fit, which signals a fitting failure"
            )
        message = f"LRT statistic {lrt:.3g} clamped to 0"
        logger.warning(message)
        warnings.append(message)
        lrt = 0.0
    return lrt


def _obtain_fim(m1, kind, structure, options, data):
    q = structure.q
    if options.fim_mode == "file":
        return load_fim(options.fim_path, q, is_inverse=options.fim_is_inverse)

    if kind == "summary":
        if options.fim_mode == "compute":
            raise FimUnavailableError(
                "fim=compute needs fitted models; a fit summary cannot be refitted "
                "(supply the FIM in the summary or with --fim <path>)"
            )
        if m1.fim is None:
            raise FimUnavailableError(
                "the alternative fit summary carries no fim; add it or use --fim <path>"
            )
        matrix = validate_fim_matrix(m1.fim, q, f"fim of {m1.source or 'fit summary'}")
        return FimEstimate(matrix, EXTRACTED, is_inverse=m1.fim_is_inverse)

    if data is None:
        raise ValidationError("The dataset is needed to compute the FIM of a fitted model")
    if options.fim_mode == "extract":
        return extract_fim(m1, data)
    return bootstrap_fim(m1, data, options.B, options.seed, workers=options.workers)


def var_comp_test(m1, m0, options=None, data=None):
    """
    Likelihood ratio test of the variance components that m0 sets to zero

    Args:
        m1 (FitResult or FitSummary): Alternative model
        m0 (FitResult or FitSummary): Null model, nested in m1
        options (TestOptions, optional): p-value mode, FIM source, M, B, seed, workers
        data (Dataset, optional): Data the FitResults were fitted on, needed
            when the FIM is extracted or bootstrapped

    Returns:
        TestResult: Statistic, cone dimensions, p-values and (when computed) weights
    """
    options = options or TestOptions()
    kind = _model_kind(m1, m0)
    if kind == "fit":
        structure = infer_test(m1.spec, m0.spec)
        fixed_names, block_terms = m1.spec.fixed_terms, m1.spec.block_terms()
    else:
        structure = infer_test(m1, m0)
        fixed_names = m1.fixed_names or m0.fixed_names
        block_terms = m1.block_terms or m0.block_terms

    warnings = []
    if kind == "fit":
        for name, fit in (("alternative", m1), ("null", m0)):
            if not fit.converged:
                message = f"The {name} model fit did not converge"
                logger.warning(message)
                warnings.append(message)

    lrt = _lrt(m1, m0, warnings)
    dims = cone_dims(structure)
    cone = Cone.from_structure(structure)
    lower, upper = pvalue_bounds(lrt, dims)
    logger.info(
        f"LRT = {lrt:.7g}; mixture over degrees of freedom {dims.d1}..{dims.df_max}"
    )

    weights, fim, from_weights, from_sample = None, None, None, None
    drawn = None
    if options.pval_mode != "bounds":
        weights = exact_weights(cone, dims)
        if weights is None:
            fim = _obtain_fim(m1, kind, structure, options, data)
            sample = draw_sample(cone, fim.to_V(), options.M, options.seed, workers=options.workers)
            weights = estimate_weights(sample, dims)
            warnings.extend(weights.warnings)
            from_sample = pvalue_from_sample(sample, lrt)
            if from_sample == 0.0:
                warnings.append(
                    "no Monte Carlo draw reaches the LRT; the sample p-value is below 1/M"
                )
            drawn = options.M
        from_weights = pvalue_from_weights(weights, lrt)

    sentence, null, alternative = describe_test(structure, fixed_names, block_terms)
    return TestResult(
        lrt=lrt,
        dims=dims,
        pvalues=PValues(lower, upper, from_weights, from_sample),
        weights=weights,
        fim=fim,
        warnings=tuple(warnings),
        tested_description=sentence,
        null_description=null,
        alternative_description=alternative,
        pval_mode=options.pval_mode,
        M=drawn,
        seed=options.seed if drawn else None,
    )
