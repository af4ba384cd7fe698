import numpy as np
import pytest

from ascnet.model import EncoderConfig
from ascnet.pretrain import TrainConfig
from ascnet.synthcorpus import CorpusConfig, generate_corpus

# small enough that finite differences over the whole model take milliseconds
FD_MODEL = dict(stage_channels=(2, 3, 4), clip_shape=(7, 15, 15), proj_dim=5, n_speeds=2)


def tiny_model(**kw) -> EncoderConfig:
    return EncoderConfig(**{**FD_MODEL, **kw})


def fd_batches(seed: int, n: int = 2, shape=(7, 15, 15)):
    rng = np.random.default_rng(seed)
    return [rng.uniform(0, 1, size=(n, 3, *shape)) for _ in range(3)], rng.integers(0, 2, n)


# a corpus and run geometry that train in well under a second per step
SMALL_CORPUS = CorpusConfig(n_videos=8, n_classes=2, T=40)
SMALL_MODEL = dict(stage_channels=(4, 4, 8), clip_shape=(8, 32, 32), proj_dim=16)
SMALL_TRAIN = dict(batch_size=4, speed_set=(1, 2), clip_frames=8, bank_capacity=4)


def small_train(**kw) -> TrainConfig:
    return TrainConfig(**{**SMALL_TRAIN, **kw})


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(SMALL_CORPUS)


# --------------------------------------------------------------------------
# acceptance verdicts: one line per criterion, repeated in the terminal summary

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def record(criterion: str, passed: bool, detail: str) -> bool:
        line = f"[{criterion}] {'PASS' if passed else 'FAIL'}: {detail}"
        VERDICTS.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
