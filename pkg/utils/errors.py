"""统一的异常类型

引擎内部只负责抛出异常，退出码的映射集中在 main.py 中完成。
"""


class HsiNetError(Exception):
    """所有自定义异常的基类"""


class ShapeError(HsiNetError, ValueError):
    """张量形状或数值不满足算子前置条件"""


class ConfigError(HsiNetError, ValueError):
    """模型配置或模块超参数非法"""


class UsageError(HsiNetError):
    """命令行用法错误"""


class DataError(HsiNetError):
    """输入数据（文件、标注、权重）错误"""


class AnnotationError(DataError):
    """标注文件格式错误，携带出错行号"""

    def __init__(self, message: str, line: int = None):
        self.line = line
        if line is not None:
            message = f"第 {line} 行: {message}"
        super().__init__(message)


class ImageFormatError(DataError):
    """图片无法读取或位深不受支持"""


class WeightFormatError(DataError):
    """权重容器错误的基类"""


class BadMagicError(WeightFormatError):
    pass


class UnsupportedVersionError(WeightFormatError):
    pass


class TruncatedError(WeightFormatError):
    pass


class UnknownTensorError(WeightFormatError):
    pass


class TensorMismatchError(WeightFormatError):
    """名称重复、缺失、形状或数据类型与模型不一致"""
