"""运行输出模块：metrics.csv、reliability.csv 与 manifest.json."""

import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from config import RunConfig
from eval_metrics import RELIABILITY_HEADER, CalibrationReport, reliability_table
from fed_server import EvalRecord, ExperimentResult

logger = logging.getLogger(__name__)

METRICS_HEADER = ("round", "mean_acc", "std_acc", "mean_nll", "ece", "mce", "brier")

# 不影响实验结果的字段，不参与运行目录哈希
_NON_SEMANTIC_KEYS = ("out", "run_name", "log_level", "max_parallel_clients")


def _fmt(value: float) -> str:
    return format(value, ".9g")


def run_name_for(cfg: RunConfig) -> str:
    """运行目录名：显式 run_name，否则为配置与种子的哈希."""
    if cfg.run_name:
        return cfg.run_name
    values = {k: v for k, v in cfg.resolved().items() if k not in _NON_SEMANTIC_KEYS}
    digest = hashlib.sha1(json.dumps(values, sort_keys=True).encode("utf-8")).hexdigest()
    return f"{cfg.mode.value}-{digest[:12]}"


def build_id() -> str:
    """源码构建标识：app 目录下全部 .py 文件内容的 sha1."""
    digest = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(path.name.encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()[:12]


def metrics_row(record: EvalRecord) -> List[str]:
    return [
        str(record.round),
        _fmt(record.mean_acc),
        _fmt(record.std_acc),
        _fmt(record.mean_nll),
        _fmt(record.ece),
        _fmt(record.mce),
        _fmt(record.brier),
    ]


def metrics_summary(record: EvalRecord) -> Dict[str, Any]:
    return {
        "round": record.round,
        "mean_acc": record.mean_acc,
        "std_acc": record.std_acc,
        "mean_nll": record.mean_nll,
        "ece": record.ece,
        "ece_percent": 100.0 * record.ece,
        "mce": record.mce,
        "brier": record.brier,
    }


class RunReporter:
    """把一次运行的结果写入 <out>/<run-name>/."""

    def __init__(self, run_dir):
        """初始化输出目录."""
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

    @property
    def metrics_path(self) -> Path:
        return self.run_dir / "metrics.csv"

    @property
    def reliability_path(self) -> Path:
        return self.run_dir / "reliability.csv"

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / "manifest.json"

    def write_metrics(self, history: Iterable[EvalRecord]) -> Path:
        """每次评估一行，列顺序固定."""
        with open(self.metrics_path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for record in history:
                writer.writerow(metrics_row(record))
        logger.info(f"已写入 {self.metrics_path}")
        return self.metrics_path

    def write_reliability(self, report: CalibrationReport) -> Path:
        with open(self.reliability_path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(RELIABILITY_HEADER)
            writer.writerows(reliability_table(report))
        logger.info(f"已写入 {self.reliability_path}")
        return self.reliability_path

    def write_manifest(self, manifest: Dict[str, Any]) -> Path:
        with open(self.manifest_path, "w", encoding="utf-8") as handle:
            json.dump(manifest, handle, ensure_ascii=False, indent=2)
            handle.write("\n")
        logger.info(f"已写入 {self.manifest_path}")
        return self.manifest_path

    def write_all(
        self,
        cfg: RunConfig,
        result: ExperimentResult,
        started_at: str,
        finished_at: str,
        theory: Optional[Dict[str, Any]] = None,
        history: Optional[Dict[str, Any]] = None,
    ) -> Dict[str, Any]:
        """写出全部三个文件并返回清单内容."""
        self.write_metrics(result.history)
        self.write_reliability(result.final.report)
        manifest = build_manifest(cfg, result, started_at, finished_at, theory, history)
        self.write_manifest(manifest)
        return manifest


def build_manifest(
    cfg: RunConfig,
    result: ExperimentResult,
    started_at: str,
    finished_at: str,
    theory: Optional[Dict[str, Any]] = None,
    history: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """运行清单，键顺序固定；config 块可直接作为配置文件重新运行."""
    novel = None
    if result.novel is not None:
        novel = {
            "client_id": result.novel.client_id,
            "baseline_accuracy": result.novel.baseline_accuracy,
            "accuracy": result.novel.accuracy,
            "improvement": result.novel.accuracy - result.novel.baseline_accuracy,
        }
    return {
        "config": cfg.resolved(),
        "seed": cfg.seed,
        "build": build_id(),
        "started_at": started_at,
        "finished_at": finished_at,
        "final_metrics": metrics_summary(result.final),
        "best": {"round": result.best_round, "mean_acc": result.best_accuracy},
        "theory": theory,
        "novel_client": novel,
        "history": history,
    }
