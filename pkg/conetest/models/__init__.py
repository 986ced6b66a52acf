from conetest.models.dataset import ColumnRoles, Dataset, IndividualData, load_csv
from conetest.models.mixed_model import CovarianceLayout, FitResult, LmmSpec, ParamVector
from conetest.models.structure import BlockTest, ConeDims, TestStructure
