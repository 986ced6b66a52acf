import json

from marshmallow import RAISE, Schema, ValidationError, fields, validate

from conetest.inference.engine import PVAL_MODES


class IntList(fields.Field):
    """Block sizes written as "[2,1]" or "2,1" """

    def _deserialize(self, value, attr, data, **kwargs):
        text = str(value).strip()
        if not text.startswith("["):
            text = f"[{text}]"
        try:
            sizes = json.loads(text)
        except json.JSONDecodeError:
            raise ValidationError(f"Not a list of block sizes: {value!r}") from None
        if not isinstance(sizes, list) or not all(
            isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in sizes
        ):
            raise ValidationError(f"Block sizes must be positive integers: {value!r}")
        return tuple(sizes)


class LevelMap(fields.Field):
    """Categorical columns with their reference level: "Sex:Male, Herd:1" """

    def _deserialize(self, value, attr, data, **kwargs):
        levels = {}
        for item in str(value).split(","):
            item = item.strip()
            if not item:
                continue
            column, sep, reference = item.partition(":")
            if not sep or not column.strip() or not reference.strip():
                raise ValidationError(f"Expected Column:Reference, got {item!r}")
            levels[column.strip()] = reference.strip()
        return levels


class RunConfigSchema(Schema):
    """Keys of a run configuration file (dotenv format)"""

    class Meta:
        unknown = RAISE

    data = fields.Str()
    response = fields.Str()
    group = fields.Str()
    categorical = LevelMap()
    fixed = fields.Str()
    random = fields.Str()
    gamma = fields.Str(validate=validate.OneOf(["full", "diag"]))
    blocks = IntList()
    null_fixed = fields.Str()
    null_random = fields.Str()
    null_gamma = fields.Str(validate=validate.OneOf(["full", "diag"]))
    null_blocks = IntList()
    m1 = fields.Str()
    m0 = fields.Str()
    pval = fields.Str(validate=validate.OneOf(PVAL_MODES))
    fim = fields.Str(validate=validate.Length(min=1))
    fim_inverse = fields.Bool()
    M = fields.Int(validate=validate.Range(min=1))
    B = fields.Int(validate=validate.Range(min=1))
    seed = fields.Int(validate=validate.Range(min=0))
    workers = fields.Int(validate=validate.Range(min=1))
    format = fields.Str(validate=validate.OneOf(["text", "json"]))
    summary = fields.Bool()
