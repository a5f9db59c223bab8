import numpy as np
import pytest
from hypothesis import settings

from tdcal.rollout import Rollout, StepRecord

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def make_rollout(probs, label=1, task_id="t0", rewards=None, features=None, entropies=None, meta=None):
    """Single action-dimension rollout from a list of chosen probabilities."""
    T = len(probs)
    rewards = rewards if rewards is not None else [0.0] * T
    steps = []
    for t in range(T):
        steps.append(
            StepRecord(
                features=features[t] if features is not None else (float(t), 1.0),
                reward=rewards[t],
                chosen_probs=(probs[t],),
                entropies=(entropies[t] if entropies is not None else 0.5,),
            )
        )
    return Rollout(task_id=task_id, steps=tuple(steps), label=label, meta=meta or {})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
