import pytest

from pfvsr import cli

TINY_TRAIN_FLAGS = [
    "--framework", "govsr", "--blocks", "1+1", "--filters", "8",
    "--iterations", "4", "--batch-size", "1", "--patch-size", "8",
    "--clip-frames", "3", "--eval-clips", "1", "--eval-frames", "5",
    "--eval-size", "8", "--dtype", "float32", "--seed", "0",
]


@pytest.fixture(scope="session")
def trained_dir(tmp_path_factory):
    """One tiny training run shared by the CLI tests."""
    out = tmp_path_factory.mktemp("trained")
    rc = cli.main(["train", "--out", str(out)] + TINY_TRAIN_FLAGS)
    assert rc == 0
    return out
