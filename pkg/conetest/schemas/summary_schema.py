from marshmallow import (
    RAISE,
    Schema,
    ValidationError,
    fields,
    post_load,
    validate,
    validates_schema,
)

from conetest.errors import ConetestError
from conetest.models.mixed_model import CovarianceLayout
from conetest.models.structure import (
    BLOCK_KINDS,
    COVARIANCES_ONLY,
    SUBBLOCK,
    BlockTest,
    TestStructure,
)


class FixedSchema(Schema):
    class Meta:
        unknown = RAISE

    count = fields.Int(required=True, validate=validate.Range(min=0))
    tested_indices = fields.List(
        fields.Int(validate=validate.Range(min=0)), load_default=list
    )
    names = fields.List(fields.Str(), load_default=None)

    @validates_schema
    def check_names(self, data, **kwargs):
        names = data.get("names")
        if names is not None and len(names) != data["count"]:
            raise ValidationError(
                f"{len(names)} names for {data['count']} fixed effects", "names"
            )


class BlockSchema(Schema):
    class Meta:
        unknown = RAISE

    size = fields.Int(required=True, validate=validate.Range(min=1))
    test = fields.Str(required=True, validate=validate.OneOf(BLOCK_KINDS))
    t = fields.Int(load_default=None, validate=validate.Range(min=1))
    s = fields.Int(load_default=None, validate=validate.Range(min=1))
    partition = fields.List(
        fields.Int(validate=validate.Range(min=1)), load_default=None
    )
    terms = fields.List(fields.Str(), load_default=None)

    @validates_schema
    def check_test_fields(self, data, **kwargs):
        if data["test"] == SUBBLOCK and data.get("s") is None:
            raise ValidationError("subblock tests need s", "s")
        if data["test"] != SUBBLOCK and data.get("s") is not None:
            raise ValidationError("s only applies to subblock tests", "s")
        if data["test"] != COVARIANCES_ONLY and (
            data.get("t") is not None or data.get("partition") is not None
        ):
            raise ValidationError("t and partition only apply to covariances_only tests", "t")
        terms = data.get("terms")
        if terms is not None and len(terms) != data["size"]:
            raise ValidationError(f"{len(terms)} terms for a block of size {data['size']}", "terms")


class FitSummarySchema(Schema):
    """
    Package-neutral record of an externally fitted model

    `fixed`, `blocks` and `residual_param_count` describe the test; they may be
    left out of the null-model summary.
    """

    class Meta:
        unknown = RAISE

    loglik = fields.Float(required=True, allow_nan=False)
    fixed = fields.Nested(FixedSchema, load_default=None)
    blocks = fields.List(fields.Nested(BlockSchema), load_default=None)
    residual_param_count = fields.Int(load_default=None, validate=validate.Range(min=0))
    theta = fields.List(fields.Float(allow_nan=False), load_default=None)
    fim = fields.List(fields.List(fields.Float(allow_nan=False)), load_default=None)
    fim_is_inverse = fields.Bool(load_default=False)
    lrt_override = fields.Float(load_default=None, allow_nan=False)

    @validates_schema
    def check_structure_fields(self, data, **kwargs):
        if (data.get("fixed") is None) != (data.get("blocks") is None):
            raise ValidationError("fixed and blocks must be given together", "blocks")
        if data.get("fixed") is None and data.get("residual_param_count") is not None:
            raise ValidationError("residual_param_count needs fixed and blocks", "residual_param_count")
        fim = data.get("fim")
        if fim is not None and any(len(row) != len(fim) for row in fim):
            raise ValidationError("fim must be a square matrix", "fim")

    @post_load
    def make_structure(self, data, **kwargs):
        data["structure"] = None
        data["fixed_names"] = None
        data["block_terms"] = None
        if data["fixed"] is None:
            return data

        fixed, blocks = data["fixed"], data["blocks"]
        residual = data["residual_param_count"]
        try:
            data["structure"] = TestStructure(
                b=fixed["count"],
                tested_fixed=tuple(fixed["tested_indices"]),
                layout=CovarianceLayout(tuple(block["size"] for block in blocks)),
                block_tests=tuple(
                    BlockTest(
                        k,
                        block["test"],
                        t=block.get("t"),
                        s=block.get("s"),
                        partition=block.get("partition"),
                    )
                    for k, block in enumerate(blocks)
                ),
                residual_param_count=1 if residual is None else residual,
            )
        except ConetestError as e:
            raise ValidationError(str(e), "blocks") from None
        data["fixed_names"] = fixed.get("names")
        if all(block.get("terms") is not None for block in blocks):
            data["block_terms"] = [tuple(block["terms"]) for block in blocks]
        return data
