import pytest

from trajforecast import cli

# small frames and inputs so the file-based pipeline stays fast on one CPU
DESK_INI = """\
[preprocess]
resize_to = 32
crop_to = 32

[synth]
frame_width = 160
frame_height = 96
speed_min = 1.5
speed_max = 3.5
kinds = start_walk, stop

[optim]
lr = 0.01
lr_reduced = 0.001
weight_decay = 0

[train]
batch_size = 32
max_epochs = 20
patience = 4

[split]
rule = fraction
holdout = 0.2
folds = 2
"""

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def desk_config(tmp_path):
    path = tmp_path / "desk.ini"
    path.write_text(DESK_INI)
    return path


@pytest.fixture
def run_cli(monkeypatch, tmp_path):
    """Invoke the CLI in-process with outputs rooted at ``tmp_path``."""
    monkeypatch.setenv("TRAJFORECAST_OUTPUT_ROOT", str(tmp_path))

    def run(*argv):
        return cli.main([str(a) for a in argv])

    return run


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
