"""
AMOS 异常体系
每个异常带一个简短的 code，CLI 用它输出可机器解析的一行错误
"""


class AmosError(Exception):
    """所有 AMOS 错误的基类"""

    code = "amos"


class ConfigError(AmosError):
    code = "config"


class DataError(AmosError):
    code = "data"


class ShapeError(AmosError):
    code = "shape"


class NumericalError(AmosError):
    """非有限的激活值或损失"""

    code = "numerical"


class CheckpointError(AmosError):
    code = "checkpoint"


class ProbeError(AmosError):
    code = "probe"


class AnalysisError(AmosError):
    code = "analysis"
