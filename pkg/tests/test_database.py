"""database 测试."""

import asyncio

from database import ParticipationRow, RoundRow, RunDatabase


async def populate(db: RunDatabase) -> None:
    await db.init()
    await db.add_round(
        RoundRow(round=1, sampled=[0, 2]),
        [ParticipationRow(1, 0, 0.5, 6, 2), ParticipationRow(1, 2, 0.25, 6, 2)],
    )
    await db.add_round(
        RoundRow(round=2, sampled=[0, 1], mean_acc=0.8, std_acc=0.1, mean_nll=0.4, ece=0.05, mce=0.2, brier=0.3),
        [ParticipationRow(2, 0, 0.125, 6, 2), ParticipationRow(2, 1, 1.5, 6, 2)],
    )


class TestRunDatabase:
    def test_rounds_round_trip(self, tmp_path):
        db = RunDatabase(str(tmp_path / "history.db"))

        async def scenario():
            await populate(db)
            return await db.get_rounds()

        rounds = asyncio.run(scenario())
        assert [r.round for r in rounds] == [1, 2]
        assert rounds[0].sampled == [0, 2]
        assert rounds[0].mean_acc is None
        assert rounds[1].mean_acc == 0.8
        assert rounds[1].brier == 0.3

    def test_participation_filter(self, tmp_path):
        db = RunDatabase(str(tmp_path / "history.db"))

        async def scenario():
            await populate(db)
            return await db.get_participation(), await db.get_participation(client_id=0)

        everything, client_zero = asyncio.run(scenario())
        assert len(everything) == 4
        assert [(p.round, p.client_id) for p in client_zero] == [(1, 0), (2, 0)]
        assert client_zero[1].kl_to_prior == 0.125

    def test_stats(self, tmp_path):
        db = RunDatabase(str(tmp_path / "history.db"))

        async def scenario():
            await populate(db)
            return await db.get_stats()

        stats = asyncio.run(scenario())
        assert stats["total_rounds"] == 2
        assert stats["participation_counts"] == {0: 2, 1: 1, 2: 1}
        assert stats["best_mean_acc"] == 0.8

    def test_rewrite_round_replaces(self, tmp_path):
        db = RunDatabase(str(tmp_path / "history.db"))

        async def scenario():
            await populate(db)
            await db.add_round(RoundRow(round=1, sampled=[3]), [])
            return await db.get_rounds()

        rounds = asyncio.run(scenario())
        assert rounds[0].sampled == [3]
        assert len(rounds) == 2
