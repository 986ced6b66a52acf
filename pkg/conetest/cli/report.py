"""
Text and JSON renderings of test results

The text layout follows the classic variance-components test printout;
every number is written with 7 significant digits.
"""

import json

from conetest.schemas.result_schema import ConeDimsSchema, TestResultSchema, WeightEstimateSchema

TITLE = "Variance components testing in mixed effects models"


def fmt(x):
    return f"{x:.7g}"


def _weights_line(weights):
    pairs = " ".join(f"{fmt(w)} ({fmt(sd)})" for w, sd in zip(weights.weights, weights.sd))
    return f"\tassociated weights (and sd): {pairs}"


def _distribution_lines(dims, weights):
    dfs = " ".join(str(df) for df in dims.dfs)
    lines = [
        f"\tmixture of {dims.n_weights} chi-bar-square distributions "
        f"with degrees of freedom {dfs}"
    ]
    if weights is not None:
        lines.append(_weights_line(weights))
    return lines


def render_text(result, full=True):
    """Report for the terminal; `full` adds the limiting distribution section"""
    pv = result.pvalues
    lines = [TITLE, result.tested_description, "", " Likelihood ratio test statistic:"]
    lines.append(f"\tLRT =  {fmt(result.lrt)}")
    lines.append("")

    if not full:
        if pv.from_weights is not None:
            lines.append(f" p-value from estimated weights: {fmt(pv.from_weights)}")
        else:
            lines.append(
                f" bounds on p-value: lower  {fmt(pv.lower_bound)} upper  {fmt(pv.upper_bound)}"
            )
    else:
        lines.append(" Limiting distribution:")
        lines.extend(_distribution_lines(result.dims, result.weights))
        lines.append("")
        lines.append(" p-value of the test:")
        if pv.from_weights is not None:
            lines.append(f"\tfrom estimated weights: {fmt(pv.from_weights)}")
        if pv.from_sample is not None:
            lines.append(f"\tfrom Monte Carlo sample: {fmt(pv.from_sample)}")
        if result.pval_mode != "approx":
            lines.append(
                f"\tbounds on p-value: lower  {fmt(pv.lower_bound)} upper  {fmt(pv.upper_bound)}"
            )

    if result.warnings:
        lines.append("")
        lines.append(" Warnings:")
        lines.extend(f"\t- {warning}" for warning in result.warnings)
    return "\n".join(lines) + "\n"


def render_json(result):
    return json.dumps(TestResultSchema().dump(result), sort_keys=True, indent=2) + "\n"


def render_weights_text(dims, weights, pvalue=None, lrt=None):
    lines = ["Chi-bar-square weights"]
    lines.extend(_distribution_lines(dims, weights))
    if pvalue is not None:
        lines.append(f"\tp-value at LRT = {fmt(lrt)}: {fmt(pvalue)}")
    return "\n".join(lines) + "\n"


def render_weights_json(dims, weights, pvalue=None, lrt=None):
    payload = {
        "dims": ConeDimsSchema().dump(dims),
        "weights": WeightEstimateSchema().dump(weights),
        "lrt": lrt,
        "pvalue": pvalue,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
