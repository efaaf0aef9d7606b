"""异常模块

实验室内所有可预期错误的统一层级。CLI 根据类别决定退出码：
ConfigError（含 ParseError）→ 2，其余 → 3。
"""

from typing import Optional, Tuple


class LabError(Exception):
    """所有实验室错误的基类"""


class ConfigError(LabError, ValueError):
    """配置无效、输入缺失或参数越界"""


class ParseError(ConfigError):
    """输入文件格式错误，消息中带有文件路径和行号"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        elif line is not None:
            location = f"第{line}行: "
        super().__init__(f"{location}{message}")


class ShapeError(LabError, ValueError):
    """矩阵形状不匹配"""

    def __init__(self, message: str, left: Tuple[int, ...] = (), right: Tuple[int, ...] = ()):
        self.left = tuple(left)
        self.right = tuple(right)
        if left or right:
            message = f"{message}: {self.left} 与 {self.right}"
        super().__init__(message)


class DomainError(LabError, ValueError):
    """输入值超出运算定义域，例如标签越界或缺少某一类别"""


class ContractError(LabError, RuntimeError):
    """调用方违反接口约定，例如为冻结张量提供梯度"""
