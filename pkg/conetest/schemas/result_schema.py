from marshmallow import Schema, fields


class ConeDimsSchema(Schema):
    q = fields.Int()
    a = fields.Int()
    d1 = fields.Int()
    df_max = fields.Int()
    n_weights = fields.Int()


class WeightEstimateSchema(Schema):
    dfs = fields.List(fields.Int())
    weights = fields.List(fields.Float())
    sd = fields.List(fields.Float())
    exact = fields.Bool()


class PValuesSchema(Schema):
    lower_bound = fields.Float()
    upper_bound = fields.Float()
    from_weights = fields.Float(allow_none=True)
    from_sample = fields.Float(allow_none=True)


class FimEstimateSchema(Schema):
    kind = fields.Str()
    is_inverse = fields.Bool()
    B = fields.Int(allow_none=True)
    theta_order = fields.List(fields.Str())
    matrix = fields.List(fields.List(fields.Float()))


class TestResultSchema(Schema):
    lrt = fields.Float()
    dims = fields.Nested(ConeDimsSchema)
    weights = fields.Nested(WeightEstimateSchema, allow_none=True)
    pvalues = fields.Nested(PValuesSchema)
    fim = fields.Nested(FimEstimateSchema, allow_none=True)
    warnings = fields.List(fields.Str())
    tested_description = fields.Str()
    null_description = fields.Str()
    alternative_description = fields.Str()
    pval_mode = fields.Str()
    M = fields.Int(allow_none=True)
    seed = fields.Int(allow_none=True)
