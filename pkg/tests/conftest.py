import numpy as np
import pytest

from afusion.datapipe.records import preprocess_trial
from afusion.synth import SynthSpec, synthesize


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """6 trials / 6 subjects, with short trials, uneven tails, sentinel rows and missing jpgs."""
    root = tmp_path_factory.mktemp("corpus6")
    spec = SynthSpec(trials=6, subjects=6, n_frames=360, seed=11, val_subjects=1,
                     lengths=(360, 250, 517, 300, 123, 433), sentinel_rate=0.03, missing_rate=0.02)
    entries, planted = synthesize(spec, root)
    records = {e.trial_id: preprocess_trial(e) for e in entries}
    return root, entries, planted, records


# --- acceptance summary ------------------------------------------------------
# tests marked ``criterion(n, title)`` get one PASS/FAIL line in the terminal summary

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _ACCEPTANCE[n] = (title, rep.passed, getattr(item, "acceptance_detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else ""))
