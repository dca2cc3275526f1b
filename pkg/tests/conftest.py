"""Session fixtures: one small synthetic corpus and one pretrained model.

Pretraining dominates suite runtime, so tests that need trained weights share
these and work on private copies (``fresh_params``).
"""

from dataclasses import dataclass

import numpy as np
import pytest

from mae_ttt.audio import FrontendConfig
from mae_ttt.harness import SynthConfig, flatten_segments, generate_synthetic_corpus, load_recordings, read_manifest
from mae_ttt.model import ModelParams, PatchConfig, private_group
from mae_ttt.pipeline import pretrain_stage
from mae_ttt.training import PretrainConfig, TrainConfig, train_probe

SMALL_SYNTH = SynthConfig(n_train=16, n_validation=2, n_test=8, seed=0)
DESK_PROBE = TrainConfig(epochs=100)


@dataclass
class Corpus:
    root: object
    entries: list


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = generate_synthetic_corpus(SMALL_SYNTH, root)
    return Corpus(root, read_manifest(manifest))


@pytest.fixture(scope="session")
def pretrained(corpus):
    return pretrain_stage(corpus.entries, corpus.root, FrontendConfig(), PatchConfig(), PretrainConfig(steps=200))


@pytest.fixture(scope="session")
def train_data(corpus, pretrained):
    train = [e for e in corpus.entries if e.split == "train"]
    recs = load_recordings(train, corpus.root, pretrained.frontend, pretrained.params.cfg)
    return flatten_segments(recs)


@pytest.fixture(scope="session")
def probed(pretrained, train_data):
    params = copy_params(pretrained.params)
    x, y, _ = train_data
    train_probe(x, y, params, DESK_PROBE)
    return params


def copy_params(p: ModelParams) -> ModelParams:
    return ModelParams(p.cfg, private_group(p.encoder), private_group(p.decoder), private_group(p.head))


@pytest.fixture
def fresh_params(probed):
    return copy_params(probed)


@pytest.fixture
def test_recordings(corpus, pretrained):
    test = [e for e in corpus.entries if e.split == "test"]
    return load_recordings(test, corpus.root, pretrained.frontend, pretrained.params.cfg)


def segment(recs, k=0) -> np.ndarray:
    return recs[k].segments[0]


# ------------------------------------------------ acceptance summary lines

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        status, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{detail}]" if detail else ""))
