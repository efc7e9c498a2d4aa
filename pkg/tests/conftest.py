import itertools

import numpy as np
import pytest


def monotone_fit_oracle(y, w):
    """Best non-decreasing weighted least-squares fit by exhaustive search.

    The optimum is constant on consecutive blocks at each block's weighted
    mean, so it suffices to enumerate all 2**(n-1) ways of cutting the
    sequence into blocks and keep the monotone candidates.
    """
    y = np.asarray(y, float)
    w = np.asarray(w, float)
    n = len(y)
    best_sse, best_fit = np.inf, None
    for cuts in itertools.product((False, True), repeat=n - 1):
        bounds = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [n]
        fit = np.empty(n)
        for a, b in zip(bounds[:-1], bounds[1:]):
            fit[a:b] = np.dot(w[a:b], y[a:b]) / w[a:b].sum()
        if np.all(np.diff(fit) >= -1e-15):
            sse = float(np.dot(w, (y - fit) ** 2))
            if sse < best_sse:
                best_sse, best_fit = sse, fit
    return best_sse, best_fit


def partition_sse_oracle(x, k):
    """Minimum within-cluster SSE over every assignment of points to k labels."""
    x = np.asarray(x, float)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    best = np.inf
    for labels in itertools.product(range(k), repeat=n):
        if len(set(labels)) != k:
            continue
        labels = np.array(labels)
        sse = 0.0
        for c in range(k):
            pts = x[labels == c]
            sse += float(((pts - pts.mean(axis=0)) ** 2).sum())
        best = min(best, sse)
    return best


def auac_grid_oracle(conf, correct, step=1e-4):
    """Midpoint rule for accuracy-vs-threshold on a dense grid, carrying the last value."""
    conf, correct = np.asarray(conf, float), np.asarray(correct, float)
    taus = np.arange(step / 2, 1.0, step)
    last = correct[conf == conf.max()].mean()
    acc = [correct[conf >= t].mean() if np.any(conf >= t) else last for t in taus]
    return float(np.mean(acc))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# Acceptance summary: one PASS/FAIL line per criterion at the end of the run.

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        number, title = mark.args
        if report.failed:
            _CRITERIA[number] = ("FAIL", title)
        elif report.when == "call" and _CRITERIA.get(number, ("PASS",))[0] == "PASS":
            _CRITERIA[number] = ("PASS" if report.passed else "SKIP", title)
    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title = _CRITERIA[number]
        terminalreporter.write_line(f"{status} criterion {number}: {title}")
