"""Session fixtures: one pretrained localizer per generated track, produced through the CLI.

Pretraining a track takes a few minutes. Set ``MINDSTACK_ARTIFACT_DIR`` to a
directory to keep the checkpoints between test sessions; existing checkpoints
there are reused.
"""
import os
from pathlib import Path

import pytest

from mindstack.cli import main


@pytest.fixture(scope="session")
def artifact_root(tmp_path_factory):
    env = os.environ.get("MINDSTACK_ARTIFACT_DIR")
    if env:
        root = Path(env)
        root.mkdir(parents=True, exist_ok=True)
        return root
    return tmp_path_factory.mktemp("artifacts")


@pytest.fixture(scope="session")
def pretrained(artifact_root):
    """``pretrained(kind)`` -> output directory holding ``pretrained.ckpt`` and its loss curve."""
    def get(kind):
        out = artifact_root / kind
        if not (out / "pretrained.ckpt").is_file():
            code = main(["pretrain", "--config", kind, "--out-dir", str(out), "--quiet"])
            assert code == 0, f"pretraining {kind} failed with exit code {code}"
        return out
    return get


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
