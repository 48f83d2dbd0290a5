"""配置管理模块.

优先级（高到低）：命令行参数 → key = value 配置文件 → 环境变量 (BPFED_ 前缀) → .env 文件。
以 .json 结尾的配置文件按运行清单读取其中的 config 块。
"""

import argparse
import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, CliSettingsSource, SettingsConfigDict, SettingsError

from errors import ConfigError


class Mode(str, Enum):
    """训练模式."""

    BPFED = "bpfed"
    FEDAVG = "fedavg"
    FEDPER = "fedper"
    FEDREP = "fedrep"
    LGFEDAVG = "lgfedavg"


DIRAC_MODES = frozenset({Mode.FEDAVG, Mode.FEDPER, Mode.FEDREP, Mode.LGFEDAVG})


class UploadRule(str, Enum):
    """上传前影子参数集的更新规则."""

    FOLLOW_POSTERIOR = "follow_posterior"
    ANCHOR_PRIOR = "anchor_prior"


class DatasetKind(str, Enum):
    SYNTH = "synth"
    MNIST = "mnist"
    FMNIST = "fmnist"


class SizeRegime(str, Enum):
    SMALL = "small"
    LARGE = "large"


# 配置文件中可使用的算法符号
KEY_ALIASES = {
    "N": "clients",
    "S": "participants",
    "T": "rounds",
    "R": "local_epochs",
    "b": "batch",
    "M": "mc_samples",
}


class RunConfig(BaseSettings):
    """一次实验运行的全部配置."""

    # 实验
    mode: Mode = Field(Mode.BPFED, description="训练模式: bpfed, fedavg, fedper, fedrep, lgfedavg")
    dataset: DatasetKind = Field(DatasetKind.SYNTH, description="数据集: synth, mnist, fmnist")
    size: SizeRegime = Field(SizeRegime.SMALL, description="样本量方案: small, large")
    seed: int = Field(0, ge=0, description="随机种子")
    clients: int = Field(10, ge=1, description="客户端总数 N")
    participants: int = Field(10, ge=1, description="每轮参与的客户端数 S")
    rounds: int = Field(100, ge=1, description="通信轮数 T")
    novel_client: bool = Field(False, description="训练结束后运行新客户端个性化评估")

    # 本地训练
    local_epochs: int = Field(10, ge=0, description="本地训练 epoch 数 R")
    batch: int = Field(50, ge=1, description="小批量大小 b")
    mc_samples: int = Field(1, ge=1, description="训练时的蒙特卡洛采样数 M")
    lr: float = Field(1e-3, gt=0, description="Adam 学习率")
    kl_weight: float = Field(1.0, ge=0, description="目标函数中 KL 项的系数")
    upload_rule: UploadRule = Field(UploadRule.FOLLOW_POSTERIOR, description="影子参数集的更新规则")
    prior_sigma: float = Field(0.1, gt=0, description="初始先验的标准差（均值为 0）")
    max_parallel_clients: int = Field(4, ge=1, description="一轮内最大并行训练的客户端数")

    # 模型
    hidden: int = Field(100, ge=1, description="隐藏层宽度")
    hidden_layers: int = Field(1, ge=1, description="隐藏层数")

    # 数据
    labels_per_client: int = Field(5, ge=1, description="每个客户端分配的类别数")
    data_dir: str = Field("data", description="IDX 数据目录，按数据集名分子目录")
    synth_dims: int = Field(20, ge=1, description="合成数据特征维度")
    synth_classes: int = Field(10, ge=2, description="合成数据类别数")
    synth_pool: int = Field(600, ge=1, description="合成数据每类样本池大小")
    synth_separation: float = Field(3.0, ge=0, description="合成数据类别均值间距")

    # 评估
    eval_interval: int = Field(10, ge=1, description="评估间隔（轮）")
    mc_test: int = Field(10, ge=1, description="预测时的蒙特卡洛采样数")
    bins: int = Field(10, ge=1, description="校准分箱数")

    # 理论诊断
    theory_alpha: float = Field(1.0, gt=0, description="eps_n 中的常数 alpha")
    theory_delta: float = Field(1.1, gt=1, description="eps_n 中的指数 delta")
    theory_bound: float = Field(1.0, gt=0, description="参数上界 B")
    sigma_eps: float = Field(1.0, gt=0, description="回归似然噪声标准差")

    # 输出与日志
    out: str = Field("runs", description="输出根目录")
    run_name: Optional[str] = Field(None, description="运行目录名，默认为配置哈希")
    log_level: str = Field("INFO", description="日志级别")

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="BPFED_",
        case_sensitive=False,
        env_parse_none_str="null",
        str_strip_whitespace=True,
        extra="forbid",
    )

    @model_validator(mode="after")
    def _check_participants(self) -> "RunConfig":
        if self.participants > self.clients:
            raise ValueError(f"participants ({self.participants}) 不能大于 clients ({self.clients})")
        return self

    def layer_sizes(self, input_dim: int, class_count: int) -> List[int]:
        return [input_dim] + [self.hidden] * self.hidden_layers + [class_count]

    def resolved(self) -> Dict[str, Any]:
        """全部字段（含默认值），按声明顺序."""
        return self.model_dump(mode="json")


def read_config_file(path) -> Dict[str, Any]:
    """读取 key = value 配置文件，或运行清单 JSON 的 config 块."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            manifest = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件 {path} 不是合法 JSON: {e}")
        values = manifest.get("config", manifest) if isinstance(manifest, dict) else None
        if not isinstance(values, dict):
            raise ConfigError(f"配置文件 {path} 缺少 config 块")
        return {k: v for k, v in values.items() if v is not None}

    values: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number} 缺少 '=': {raw.strip()}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = KEY_ALIASES.get(key, key).replace("-", "_")
        if not key:
            raise ConfigError(f"{path}:{number} 键为空")
        values[key] = value
    return values


def _config_error(error: ValidationError) -> ConfigError:
    first = error.errors()[0]
    key = ".".join(str(part) for part in first.get("loc", ())) or None
    if first.get("type") == "extra_forbidden":
        return ConfigError(f"未知配置项: {key}", key=key)
    if key:
        return ConfigError(f"配置项 {key} 非法: {first.get('msg')}", key=key)
    return ConfigError(f"配置非法: {first.get('msg')}")


def parse_config(argv: Optional[Sequence[str]] = None, path=None) -> RunConfig:
    """解析命令行参数与配置文件，命令行参数优先."""
    args = list(argv or [])
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument("--config", default=None)
    known, rest = pre.parse_known_args(args)
    file_path = known.config or path

    file_values = read_config_file(file_path) if file_path else {}
    try:
        cli_source = CliSettingsSource(
            RunConfig,
            cli_kebab_case=True,
            cli_implicit_flags=True,
            cli_exit_on_error=False,
            cli_prog_name="bpfed",
        )
        return RunConfig(_cli_settings_source=cli_source(args=rest), **file_values)
    except ValidationError as e:
        raise _config_error(e) from e
    except SettingsError as e:
        raise ConfigError(f"命令行参数非法: {e}") from e
