"""BPFed 联邦学习模拟器主程序."""

import asyncio
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from config import Mode, RunConfig, parse_config
from database import ParticipationRow, RoundRow, RunDatabase
from errors import ConfigError, SimulatorError
from fed_server import ExperimentResult, RoundSummary, run_experiment
from reporter import RunReporter, run_name_for
from theory_diag import bound_inputs_for, theory_report

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class ExperimentRunner:
    """一次实验运行：准备输出目录、执行训练、写出结果."""

    def __init__(self, config: RunConfig):
        """初始化运行器."""
        self.config = config
        self.run_dir = Path(config.out) / run_name_for(config)
        self.db: Optional[RunDatabase] = None
        self.reporter: Optional[RunReporter] = None
        self.result: Optional[ExperimentResult] = None

    async def initialize(self) -> None:
        """创建输出目录、配置日志并初始化历史数据库."""
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._setup_logging()
        logging.info(f"运行目录: {self.run_dir}")

        self.db = RunDatabase(str(self.run_dir / "history.db"))
        await self.db.init()
        self.reporter = RunReporter(self.run_dir)
        logging.info("初始化完成")

    def _setup_logging(self) -> None:
        """配置日志."""
        logging.basicConfig(
            level=getattr(logging, self.config.log_level.upper(), logging.INFO),
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            handlers=[
                logging.FileHandler(self.run_dir / "run.log", encoding='utf-8'),
                logging.StreamHandler()
            ],
            force=True,
        )

        # 第三方库日志级别
        logging.getLogger('aiosqlite').setLevel(logging.WARNING)

    async def _record_round(self, summary: RoundSummary) -> None:
        """把一轮的记录写入历史数据库."""
        evaluation = summary.evaluation
        row = RoundRow(round=summary.round, sampled=summary.sampled)
        if evaluation is not None:
            row.mean_acc = evaluation.mean_acc
            row.std_acc = evaluation.std_acc
            row.mean_nll = evaluation.mean_nll
            row.ece = evaluation.ece
            row.mce = evaluation.mce
            row.brier = evaluation.brier
        participation = [
            ParticipationRow(
                round=summary.round,
                client_id=report.client_id,
                kl_to_prior=report.kl_to_prior,
                upload_size=report.upload_size,
                steps=report.steps,
            )
            for report in summary.reports
        ]
        await self.db.add_round(row, participation)

    def _theory(self, result: ExperimentResult) -> dict:
        cfg = self.config
        state = result.state
        inputs = bound_inputs_for(
            state.layout.layer_sizes,
            state.layout.t1,
            state.layout.t2,
            n=state.clients[0].shard.train.size,
            N=cfg.clients,
            B=cfg.theory_bound,
            alpha=cfg.theory_alpha,
            delta=cfg.theory_delta,
            sigma_eps=cfg.sigma_eps,
        )
        posteriors = [c.eta for c in state.clients] if cfg.mode == Mode.BPFED else []
        return theory_report(inputs, posteriors)

    async def _history(self) -> dict:
        """从历史数据库汇总参与与评估记录."""
        rounds = await self.db.get_rounds()
        participation = await self.db.get_participation()
        stats = await self.db.get_stats()
        return {
            "rounds_recorded": stats["total_rounds"],
            "evaluated_rounds": [row.round for row in rounds if row.mean_acc is not None],
            "best_mean_acc": stats["best_mean_acc"],
            "participation_counts": {
                str(client_id): count for client_id, count in sorted(stats["participation_counts"].items())
            },
            "total_upload_size": sum(p.upload_size for p in participation),
            "total_local_steps": sum(p.steps for p in participation),
        }

    async def run(self) -> ExperimentResult:
        """执行实验并写出 metrics.csv、reliability.csv 与 manifest.json."""
        started_at = _now()
        logging.info(f"开始实验: 模式 {self.config.mode.value}，数据集 {self.config.dataset.value}")
        self.result = await run_experiment(self.config, on_round=self._record_round)
        self.reporter.write_all(
            self.config, self.result, started_at, _now(), self._theory(self.result), await self._history()
        )

        final = self.result.final
        logging.info(
            f"实验完成: 最终准确率 {final.mean_acc:.4f} ± {final.std_acc:.4f}，"
            f"最佳 {self.result.best_accuracy:.4f} (第 {self.result.best_round} 轮)，"
            f"ECE {100 * final.ece:.2f}%"
        )
        if self.result.novel is not None:
            novel = self.result.novel
            logging.info(f"新客户端准确率: {novel.baseline_accuracy:.4f} → {novel.accuracy:.4f}")
        return self.result

    async def stop(self) -> None:
        """关闭日志文件."""
        for handler in list(logging.getLogger().handlers):
            if isinstance(handler, logging.FileHandler):
                handler.close()
                logging.getLogger().removeHandler(handler)


async def main(argv: Optional[Sequence[str]] = None) -> int:
    """主函数，返回退出码."""
    try:
        config = parse_config(argv)
    except ConfigError as e:
        print(f"配置错误: {e}", file=sys.stderr)
        return EXIT_CONFIG

    runner = ExperimentRunner(config)
    try:
        await runner.initialize()
        await runner.run()
        return EXIT_OK
    except FileNotFoundError as e:
        logging.error(f"数据文件缺失: {e}")
        return EXIT_FAILURE
    except SimulatorError as e:
        logging.error(f"实验失败: {e}")
        return EXIT_FAILURE
    finally:
        await runner.stop()


if __name__ == "__main__":
    try:
        sys.exit(asyncio.run(main(sys.argv[1:])))
    except KeyboardInterrupt:
        print("收到键盘中断信号", file=sys.stderr)
        sys.exit(EXIT_FAILURE)
