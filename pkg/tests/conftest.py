import os
from pathlib import Path

import pytest

ACCEPTANCE_LINES: list[str] = []


def desk_cache_path() -> Path:
    root = Path(os.environ.get("SSDM_CACHE", Path.home() / ".cache" / "ssdm"))
    return root / "desk_base32_e30_s0.ssdm"


@pytest.fixture(scope="session")
def desk_checkpoint():
    """The desk-scale reference model; trained once (about 40 min on one core) and cached."""
    from ssdm.pipeline import train_desk_model
    from ssdm.trainer import load_checkpoint, save_checkpoint

    path = desk_cache_path()
    if not path.is_file():
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(train_desk_model(), path)
    return load_checkpoint(path)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
