import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from mvcc.data import generate
from mvcc.encoder import ModelConfig

threadpool_limits(limits=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(
        image_size=8, patch=4, channels=8, enc_blocks=2, heads=2, dec_layers=1, dec_width=8, vocab_size=9, max_len=6, lora_rank=2
    )


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    generate(5, 24, out, splits={"train": 16, "val": 4, "test": 4})
    return out


# acceptance criteria report: one line per criterion at the end of the run
_CRITERIA: dict[int, tuple[bool, str]] = {}


class _Recorder:
    def __init__(self, number: int):
        self.number = number
        self.done = False

    def __call__(self, passed: bool, detail: str) -> bool:
        _CRITERIA[self.number] = (bool(passed), detail)
        self.done = True
        print(f"criterion {self.number}: {'PASS' if passed else 'FAIL'} {detail}")
        return bool(passed)


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    rec = _Recorder(marker.args[0])
    yield rec
    if not rec.done:
        _CRITERIA[rec.number] = (False, "did not complete")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {n}: {detail}")
