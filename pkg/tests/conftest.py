import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine(freq, seconds=0.5, amp=0.5, sr=16000):
    t = np.arange(int(seconds * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def random_valid_annotation(rng, max_notes=24, span=6.0, max_poly=16, min_gap=0.08):
    """Random annotation satisfying the round-trip preconditions.

    Same-pitch notes are separated by at least `min_gap` seconds (>3 frames),
    at most `max_poly` notes overlap, durations are at least 2 frames.
    """
    from stream_amt.vocab import Annotation

    notes, pedal = [], []
    for _ in range(int(rng.integers(0, max_notes + 1))):
        p = int(rng.integers(21, 109))
        a = round(float(rng.uniform(0.0, span)), 3)
        b = round(a + float(rng.uniform(0.04, 3.0)), 3)
        if any(q == p and a < y + min_gap and x < b + min_gap for q, x, y in notes):
            continue
        if sum(1 for _, x, y in notes if x < b + 0.04 and a < y + 0.04) >= max_poly:
            continue
        notes.append((p, a, b))
    if rng.random() < 0.5:
        a = float(rng.uniform(0, span))
        pedal.append((round(a, 3), round(a + float(rng.uniform(0.1, 2)), 3)))
    notes.sort(key=lambda n: (n[1], n[0]))
    return Annotation(notes, pedal)


# -- acceptance summary -------------------------------------------------------------

_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::test_criterion_")[1].split("[")[0]
    if report.when == "call" or report.outcome != "passed":
        prev = _acceptance.get(name)
        if prev is None or prev == "PASS":
            _acceptance[name] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance, key=lambda n: int(n.split("_")[0])):
        num, label = name.split("_", 1)
        terminalreporter.write_line(f"criterion {int(num):2d} {label:<28} {_acceptance[name]}")
