"""reporter 测试."""

from eval_metrics import calibration
from fed_server import EvalRecord
from reporter import METRICS_HEADER, RunReporter, metrics_row, run_name_for

from conftest import make_config


def record(round_index=3):
    report = calibration([[0.9, 0.1], [0.6, 0.4]], [0, 1], n_bins=10)
    return EvalRecord(round=round_index, mean_acc=0.5, std_acc=0.5, mean_nll=0.3, report=report)


class TestRunName:
    def test_stable_hash(self):
        assert run_name_for(make_config()) == run_name_for(make_config())
        assert run_name_for(make_config()).startswith("bpfed-")

    def test_ignores_output_settings(self):
        assert run_name_for(make_config(out="a", max_parallel_clients=1)) == run_name_for(
            make_config(out="b", max_parallel_clients=3)
        )

    def test_depends_on_seed(self):
        assert run_name_for(make_config(seed=1)) != run_name_for(make_config(seed=2))

    def test_explicit_name(self):
        assert run_name_for(make_config(run_name="mine")) == "mine"


class TestFiles:
    def test_metrics_row(self):
        row = metrics_row(record())
        assert len(row) == len(METRICS_HEADER)
        assert row[:4] == ["3", "0.5", "0.5", "0.3"]

    def test_write_metrics(self, tmp_path):
        reporter = RunReporter(tmp_path / "run")
        path = reporter.write_metrics([record(1), record(2)])
        lines = path.read_text(encoding="utf-8").split("\n")
        assert lines[0] == ",".join(METRICS_HEADER)
        assert lines[1].startswith("1,0.5,")
        assert lines[3] == ""

    def test_write_reliability(self, tmp_path):
        reporter = RunReporter(tmp_path / "run")
        path = reporter.write_reliability(record().report)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "lo,hi,count,mean_confidence,accuracy"
        assert lines[1] == "0,0.1,0,,"
        assert len(lines) == 11
