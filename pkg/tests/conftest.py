from __future__ import annotations

import numpy as np
import pytest

import taskprune as tp
from taskprune.calibrate import FactorSet, build_cache, capture_calibration
from taskprune.linalg import derive_rng
from taskprune.search import TaskMode, TaskSpec


@pytest.fixture(scope="session")
def tiny_config() -> tp.TransformerConfig:
    return tp.TransformerConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_seq_len=32)


@pytest.fixture(scope="session")
def tiny_model(tiny_config) -> tp.ModelWeights:
    return tp.random_model(tiny_config, seed=11, spectral_decay=0.7)


@pytest.fixture(scope="session")
def tiny_letters() -> list[int]:
    rng = derive_rng(900)
    return sorted(rng.choice(np.arange(1, 256), size=16, replace=False).tolist())


@pytest.fixture(scope="session")
def tiny_corpus(tiny_letters) -> bytes:
    rng = derive_rng(901)
    return bytes(rng.choice(tiny_letters, size=3000).tolist())


@pytest.fixture(scope="session")
def tiny_capture(tiny_model, tiny_corpus) -> tp.ActivationCapture:
    return capture_calibration(tiny_model, tiny_corpus, min_tokens=2500)


@pytest.fixture(scope="session")
def tiny_cache(tiny_model, tiny_capture):
    opts = tp.FactorizeOptions(epochs=6, batch_tokens=500, learning_rate=0.003, seed=3)
    return build_cache(tiny_model, tiny_capture, opts=opts, workers=4)


@pytest.fixture(scope="session")
def tiny_task(tiny_letters) -> TaskSpec:
    rng = derive_rng(902)
    prompts = [bytes(rng.choice(tiny_letters, size=8).tolist()) for _ in range(32)]
    return TaskSpec(mode=TaskMode.BASELINE_AGREEMENT, prompts=prompts, expected=None,
                    max_new_tokens=3, epsilon=0.1)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion, whatever else ran."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance" in nodeid and "::" in nodeid:
                name = nodeid.split("::")[-1]
                verdict = "PASS" if outcome == "passed" else "FAIL"
                lines.append((name, verdict))
    if lines:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for name, verdict in sorted(set(lines)):
            terminalreporter.write_line(f"  {verdict}  {name}")
