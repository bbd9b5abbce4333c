import json
from dataclasses import asdict

import pytest
import torch

from clotvc.nets import toy_nets_config

import synth


@pytest.fixture(autouse=True)
def _single_thread():
    # bit-level reproducibility checks assume a fixed reduction order
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def wav_corpus(tmp_path_factory):
    return synth.write_corpus(tmp_path_factory.mktemp("corpus"), n_utts=6, seconds=(0.8, 1.2))


def run_config(tmp, corpus, **overrides):
    cfg = {
        "seed": 3,
        "speakers": ["SM1", "SF1"],
        "nets": json.loads(json.dumps(asdict(toy_nets_config()))),
        "trainer": {"epochs": 2, "checkpoint_every": 1},
        "evalkit": {"dataset": "synthetic", "genders": {"SM1": "M", "SF1": "F"}},
        "paths": {"corpus_root": str(corpus), "cache": str(tmp / "cache"),
                  "checkpoints": str(tmp / "ckpt"), "reports": str(tmp / "reports")},
        "vocoder": "griffin_lim",
        "griffin_lim_iters": 8,
    }
    for key, value in overrides.items():
        node = cfg
        *head, last = key.split(".")
        for part in head:
            node = node.setdefault(part, {})
        node[last] = value
    path = tmp / "run.json"
    path.write_text(json.dumps(cfg, indent=1))
    return path


@pytest.fixture
def make_config(tmp_path, wav_corpus):
    return lambda **kw: run_config(tmp_path, wav_corpus, **kw)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
