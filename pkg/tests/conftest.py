import numpy as np
import pytest
from hypothesis import settings

from fscd.data import BitemporalSample, SynthParams, synth_generate
from fscd.model import ModelConfig

settings.register_profile("fscd", max_examples=40, deadline=None)
settings.load_profile("fscd")


@pytest.fixture
def tiny_config():
    # 2 stages on 16 px tiles: fast enough for per-test training
    return ModelConfig(encoder_channels=[4, 8], blocks_per_stage=1, tile_size=16)


@pytest.fixture
def tiny_pairs():
    return synth_generate(SynthParams(size=16, n_buildings=(1, 2), seed=3, n_samples=6), "change")


def random_sample(gen, size=16, sid="s"):
    return BitemporalSample(gen.random((size, size, 3)).astype(np.float32),
                            gen.random((size, size, 3)).astype(np.float32),
                            (gen.random((size, size)) > 0.5).astype(np.uint8), sid)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[key])
