"""运行历史数据库模块."""

import aiosqlite
import asyncio
import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)


@dataclass
class RoundRow:
    """一轮通信的记录；未评估的轮指标为 None."""
    round: int
    sampled: List[int]
    mean_acc: Optional[float] = None
    std_acc: Optional[float] = None
    mean_nll: Optional[float] = None
    ece: Optional[float] = None
    mce: Optional[float] = None
    brier: Optional[float] = None


@dataclass
class ParticipationRow:
    """客户端参与一轮的记录."""
    round: int
    client_id: int
    kl_to_prior: float
    upload_size: int
    steps: int = 0


class RunDatabase:
    """运行历史 (history.db) 的读写."""

    def __init__(self, db_path: str):
        """初始化数据库."""
        self.db_path = db_path
        self._lock = asyncio.Lock()

    async def init(self) -> None:
        """初始化数据库表."""
        async with aiosqlite.connect(self.db_path) as db:
            await db.execute("""
                CREATE TABLE IF NOT EXISTS rounds (
                    round INTEGER PRIMARY KEY,
                    sampled TEXT NOT NULL,
                    mean_acc REAL,
                    std_acc REAL,
                    mean_nll REAL,
                    ece REAL,
                    mce REAL,
                    brier REAL
                )
            """)

            await db.execute("""
                CREATE TABLE IF NOT EXISTS participation (
                    round INTEGER NOT NULL,
                    client_id INTEGER NOT NULL,
                    kl_to_prior REAL NOT NULL,
                    upload_size INTEGER NOT NULL,
                    steps INTEGER NOT NULL DEFAULT 0,
                    PRIMARY KEY (round, client_id)
                )
            """)

            await db.commit()

    async def add_round(self, row: RoundRow, participation: List[ParticipationRow]) -> None:
        """写入一轮记录及其参与记录."""
        async with self._lock:
            async with aiosqlite.connect(self.db_path) as db:
                await db.execute("""
                    INSERT OR REPLACE INTO rounds
                    (round, sampled, mean_acc, std_acc, mean_nll, ece, mce, brier)
                    VALUES (?, ?, ?, ?, ?, ?, ?, ?)
                """, (
                    row.round, json.dumps(row.sampled), row.mean_acc, row.std_acc,
                    row.mean_nll, row.ece, row.mce, row.brier
                ))
                await db.executemany("""
                    INSERT OR REPLACE INTO participation
                    (round, client_id, kl_to_prior, upload_size, steps)
                    VALUES (?, ?, ?, ?, ?)
                """, [
                    (p.round, p.client_id, p.kl_to_prior, p.upload_size, p.steps)
                    for p in participation
                ])
                await db.commit()

    async def get_rounds(self) -> List[RoundRow]:
        """按轮次升序返回全部记录."""
        rows = []
        async with aiosqlite.connect(self.db_path) as db:
            async with db.execute("""
                SELECT round, sampled, mean_acc, std_acc, mean_nll, ece, mce, brier
                FROM rounds ORDER BY round ASC
            """) as cursor:
                for record in await cursor.fetchall():
                    round_index, sampled, *metrics = record
                    rows.append(RoundRow(round_index, json.loads(sampled), *metrics))
        return rows

    async def get_participation(self, client_id: Optional[int] = None) -> List[ParticipationRow]:
        """参与记录，可按客户端过滤."""
        query = "SELECT round, client_id, kl_to_prior, upload_size, steps FROM participation"
        params: tuple = ()
        if client_id is not None:
            query += " WHERE client_id = ?"
            params = (client_id,)
        query += " ORDER BY round ASC, client_id ASC"
        async with aiosqlite.connect(self.db_path) as db:
            async with db.execute(query, params) as cursor:
                return [ParticipationRow(*record) for record in await cursor.fetchall()]

    async def get_stats(self) -> Dict[str, Any]:
        """获取统计信息."""
        stats = {}
        async with aiosqlite.connect(self.db_path) as db:
            async with db.execute("SELECT COUNT(*) FROM rounds") as cursor:
                stats["total_rounds"] = (await cursor.fetchone())[0]

            async with db.execute("""
                SELECT client_id, COUNT(*) FROM participation GROUP BY client_id
            """) as cursor:
                stats["participation_counts"] = dict(await cursor.fetchall())

            async with db.execute("SELECT MAX(mean_acc) FROM rounds") as cursor:
                stats["best_mean_acc"] = (await cursor.fetchone())[0]

        return stats
