"""
Which parameters a variance-components test sets to zero, and the dimensions
of the cone its limiting distribution lives on
"""

import logging
from dataclasses import dataclass

from conetest.errors import NestednessError, ValidationError
from conetest.models.mixed_model import CovarianceLayout, LmmSpec
from conetest.utils.linalg import vech_pairs

logger = logging.getLogger(__name__)

UNTESTED = "untested"
COVARIANCES_ONLY = "covariances_only"
FULL = "full"
SUBBLOCK = "subblock"
BLOCK_KINDS = (UNTESTED, COVARIANCES_ONLY, FULL, SUBBLOCK)


@dataclass(frozen=True)
class BlockTest:
    """
    Hypothesis on one covariance block

    - untested: the block is free under both hypotheses
    - covariances_only: the t covariances linking the parts of `partition`
      are zero under H0 (all r(r-1)/2 covariances when no partition is given)
    - full: the whole block is zero under H0
    - subblock: the trailing s x s sub-block and its cross covariances are zero
    """

    block_index: int
    kind: str
    t: int = None
    s: int = None
    partition: tuple = None

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValidationError(f"Unknown block test kind: {self.kind}")
        if self.partition is not None:
            object.__setattr__(self, "partition", tuple(int(x) for x in self.partition))

    def validate(self, r):
        if self.kind == COVARIANCES_ONLY:
            if r < 2:
                raise ValidationError(
                    f"Block {self.block_index} has no covariances to test (size {r})"
                )
            partition = self.effective_partition(r)
            if sum(partition) != r or any(x < 1 for x in partition) or len(partition) < 2:
                raise ValidationError(
                    f"Block {self.block_index}: partition {partition} does not split size {r}"
                )
            expected = covariance_count(r, partition)
            t = expected if self.t is None else self.t
            if not 1 <= t <= r * (r - 1) // 2 or t != expected:
                raise ValidationError(
                    f"Block {self.block_index}: t={t} does not match partition {partition} "
                    f"(expected {expected})"
                )
        elif self.kind == SUBBLOCK:
            if self.s is None or not 1 <= self.s < r:
                raise ValidationError(
                    f"Block {self.block_index}: sub-block size s={self.s} must satisfy 1 <= s < {r}"
                )

    def effective_partition(self, r):
        if self.partition is not None:
            return self.partition
        return (1,) * r

    def tested_count(self, r):
        if self.kind == UNTESTED:
            return 0
        if self.kind == COVARIANCES_ONLY:
            return covariance_count(r, self.effective_partition(r))
        if self.kind == FULL:
            return r * (r + 1) // 2
        return self.s * (self.s + 1) // 2 + self.s * (r - self.s)

    def linear_count(self, r):
        if self.kind == COVARIANCES_ONLY:
            return covariance_count(r, self.effective_partition(r))
        if self.kind == SUBBLOCK:
            return self.s * (r - self.s)
        return 0


def covariance_count(r, partition):
    """Covariances between different parts of a partition of r effects"""
    return r * (r - 1) // 2 - sum(x * (x - 1) // 2 for x in partition)


@dataclass(frozen=True)
class TestStructure:
    b: int
    tested_fixed: tuple
    layout: CovarianceLayout
    block_tests: tuple
    residual_param_count: int = 1

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self):
        object.__setattr__(self, "tested_fixed", tuple(int(k) for k in self.tested_fixed))
        object.__setattr__(self, "block_tests", tuple(self.block_tests))
        if self.b < 0 or self.residual_param_count < 0:
            raise ValidationError("Parameter counts must be non-negative")
        if len(set(self.tested_fixed)) != len(self.tested_fixed):
            raise ValidationError(f"Tested fixed effects repeat: {self.tested_fixed}")
        if any(not 0 <= k < self.b for k in self.tested_fixed):
            raise ValidationError(
                f"Tested fixed effect indices {self.tested_fixed} out of range for b={self.b}"
            )
        if len(self.block_tests) != len(self.layout.blocks):
            raise ValidationError(
                f"{len(self.block_tests)} block tests for {len(self.layout.blocks)} blocks"
            )
        for k, (test, r) in enumerate(zip(self.block_tests, self.layout.blocks)):
            if test.block_index != k:
                raise ValidationError(f"Block test {k} carries index {test.block_index}")
            test.validate(r)
        if self.n_tested == 0:
            raise ValidationError("Nothing is tested")

    @property
    def r_f(self):
        return len(self.tested_fixed)

    @property
    def n_tested(self):
        return self.r_f + sum(
            test.tested_count(r) for test, r in zip(self.block_tests, self.layout.blocks)
        )

    @property
    def q(self):
        return self.b + self.layout.n_params + self.residual_param_count

    def tested_blocks(self):
        return [test for test in self.block_tests if test.kind != UNTESTED]


@dataclass(frozen=True)
class ConeDims:
    q: int
    a: int
    d1: int
    df_max: int
    n_weights: int

    def __post_init__(self):
        if not 0 <= self.d1 <= self.df_max <= self.q:
            raise ValidationError(
                f"Inconsistent cone dimensions d1={self.d1}, df_max={self.df_max}, q={self.q}"
            )

    @property
    def dfs(self):
        return list(range(self.d1, self.df_max + 1))


def cone_dims(ts):
    """a counts every untested scalar parameter; df_max every tested one"""
    df_max = ts.n_tested
    d1 = ts.r_f + sum(
        test.linear_count(r) for test, r in zip(ts.block_tests, ts.layout.blocks)
    )
    return ConeDims(q=ts.q, a=ts.q - df_max, d1=d1, df_max=df_max, n_weights=df_max - d1 + 1)


@dataclass(frozen=True)
class PsdDescriptor:
    """Tested s x s diagonal sub-block: canonical indices of its vech entries"""

    size: int
    indices: tuple
    rectangle: tuple = ()  # cross covariances with the untested part, free in the cone


@dataclass(frozen=True)
class ConeIndexMap:
    q: int
    zero: tuple
    linear: tuple
    halflines: tuple
    psd: tuple

    def covered(self):
        indices = list(self.zero) + list(self.linear) + list(self.halflines)
        for descriptor in self.psd:
            indices.extend(descriptor.indices)
        return sorted(indices)


def tested_index_sets(ts):
    """
    Map the canonical flattening onto the cone factors

    Untested coordinates go to `zero`; tested fixed effects, tested
    covariances and sub-block cross covariances go to `linear`; tested
    single variances go to `halflines`; tested blocks of size >= 2 become PSD
    descriptors.
    """
    zero, linear, halflines, psd = [], [], [], []
    for k in range(ts.b):
        (linear if k in ts.tested_fixed else zero).append(k)

    start = ts.b
    for test, r in zip(ts.block_tests, ts.layout.blocks):
        local = {pair: start + pos for pos, pair in enumerate(vech_pairs(r))}
        if test.kind == UNTESTED:
            zero.extend(local.values())
        elif test.kind == FULL:
            if r == 1:
                halflines.append(local[(0, 0)])
            else:
                psd.append(PsdDescriptor(r, tuple(local[pair] for pair in vech_pairs(r))))
        elif test.kind == SUBBLOCK:
            u = r - test.s
            rectangle = [local[(i, j)] for (i, j) in vech_pairs(r) if i >= u and j < u]
            inner = [local[(i, j)] for (i, j) in vech_pairs(r) if j >= u]
            zero.extend(local[(i, j)] for (i, j) in vech_pairs(r) if i < u)
            linear.extend(rectangle)
            if test.s == 1:
                halflines.extend(inner)
            else:
                psd.append(PsdDescriptor(test.s, tuple(inner), tuple(rectangle)))
        else:
            part_of = []
            for part, size in enumerate(test.effective_partition(r)):
                part_of.extend([part] * size)
            for (i, j), index in local.items():
                (zero if part_of[i] == part_of[j] else linear).append(index)
        start += r * (r + 1) // 2

    zero.extend(range(start, start + ts.residual_param_count))
    return ConeIndexMap(
        q=ts.q,
        zero=tuple(sorted(zero)),
        linear=tuple(sorted(linear)),
        halflines=tuple(sorted(halflines)),
        psd=tuple(psd),
    )


def _infer_block(k, terms, null_blocks):
    """BlockTest for H1 block k given the H0 blocks that fall inside it"""
    r = len(terms)
    if not null_blocks:
        return BlockTest(k, FULL)
    flat = [term for block in null_blocks for term in block]
    if len(null_blocks) == 1 and tuple(flat) == tuple(terms):
        return BlockTest(k, UNTESTED)
    if len(null_blocks) == 1 and tuple(flat) == tuple(terms[: len(flat)]):
        return BlockTest(k, SUBBLOCK, s=r - len(flat))
    if tuple(flat) == tuple(terms):
        partition = tuple(len(block) for block in null_blocks)
        return BlockTest(k, COVARIANCES_ONLY, t=covariance_count(r, partition), partition=partition)
    raise NestednessError(
        f"Null blocks {[list(b) for b in null_blocks]} inside block {list(terms)} are not "
        "a leading sub-block or a consecutive split; reorder the random terms so the "
        "tested effects come last",
        component=f"random block {list(terms)}",
    )


def _infer_from_specs(spec1, spec0):
    missing = [term for term in spec0.fixed_terms if term not in spec1.fixed_terms]
    if missing:
        raise NestednessError(
            f"Null model has fixed effect {missing[0]!r} absent from the alternative",
            component=f"fixed term {missing[0]}",
        )
    tested_fixed = tuple(
        k for k, term in enumerate(spec1.fixed_terms) if term not in spec0.fixed_terms
    )

    owner = {}
    for k, terms in enumerate(spec1.block_terms()):
        for term in terms:
            owner[term] = k
    inside = {k: [] for k in range(len(spec1.layout.blocks))}
    for block in spec0.block_terms():
        homes = {owner.get(term) for term in block}
        if None in homes:
            absent = next(term for term in block if term not in owner)
            raise NestednessError(
                f"Null model has random effect {absent!r} absent from the alternative",
                component=f"random term {absent}",
            )
        if len(homes) > 1:
            raise NestednessError(
                f"Null block {list(block)} spans several alternative blocks",
                component=f"random block {list(block)}",
            )
        inside[homes.pop()].append(block)

    block_tests = tuple(
        _infer_block(k, terms, inside[k]) for k, terms in enumerate(spec1.block_terms())
    )
    if not tested_fixed and all(test.kind == UNTESTED for test in block_tests):
        raise NestednessError("The two models are identical: nothing is tested")
    return TestStructure(
        b=spec1.b,
        tested_fixed=tested_fixed,
        layout=spec1.layout,
        block_tests=block_tests,
        residual_param_count=1,
    )


def infer_test(spec1, spec0):
    """
    TestStructure taking the alternative model spec1 to the null model spec0

    Both arguments are LmmSpec values, or both are fit summaries carrying a
    `structure`. Summaries describe the test themselves; when both do, they
    must agree.

    Raises:
        NestednessError: spec0 is not obtained from spec1 by zeroing parameters
    """
    if isinstance(spec1, LmmSpec) and isinstance(spec0, LmmSpec):
        structure = _infer_from_specs(spec1, spec0)
    elif isinstance(spec1, LmmSpec) or isinstance(spec0, LmmSpec):
        raise ValidationError("Both models must be fitted models or both fit summaries")
    else:
        structure = spec1.structure or spec0.structure
        if structure is None:
            raise NestednessError("Neither fit summary describes the tested parameters")
        if spec0.structure is not None and spec0.structure != structure:
            raise NestednessError(
                "The two fit summaries describe different tests", component="structure"
            )
    logger.info(
        f"Test structure: {structure.r_f} fixed effects and "
        f"{len(structure.tested_blocks())} covariance blocks tested"
    )
    return structure
