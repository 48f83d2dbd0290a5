"""异常定义模块."""

from typing import Optional


class SimulatorError(Exception):
    """模拟器异常基类."""


class InvalidArgumentError(SimulatorError, ValueError):
    """参数非法（形状不匹配、取值越界、非有限值等）."""


class DomainError(SimulatorError, ValueError):
    """公式在给定输入下无定义."""


class EmptyDataError(SimulatorError):
    """客户端数据为空."""


class FormatError(SimulatorError):
    """数据文件格式错误."""


class AllocationError(SimulatorError):
    """类别样本池不足以完成分配."""


class ConfigError(SimulatorError):
    """配置错误."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class TrainingDivergedError(SimulatorError):
    """本地训练发散（梯度非有限或超过阈值）."""

    def __init__(self, client_id: int, round_index: int, step: int, detail: str = ""):
        self.client_id = client_id
        self.round_index = round_index
        self.step = step
        message = f"客户端 {client_id} 在第 {round_index} 轮第 {step} 步训练发散"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class RoundAbortedError(SimulatorError):
    """通信轮被中止（某个被采样客户端失败）."""

    def __init__(self, round_index: int, client_id: int, cause: BaseException):
        self.round_index = round_index
        self.client_id = client_id
        self.cause = cause
        super().__init__(f"第 {round_index} 轮中止，失败客户端 {client_id}: {cause}")
