import pytest

MOON_PLAN = """\
BASE: a man riding a horse on grassland
SLOT s1: man
SLOT s2: horse
SLOT s3: grassland
STEP 1: REPLACE grassland -> the moon @ s3
RESULT: a man riding a horse on the moon
STEP 2: REPLACE man -> cat astronaut @ s1
RESULT: a cat astronaut riding a horse on the moon
TARGETS: cat astronaut, horse, moon
"""

MOON_ENTRY = {"id": "moon-0000", "concepts": ["cat astronaut", "horse", "moon"],
              "prompt": "a cat astronaut riding a horse on the moon", "n": 3}


@pytest.fixture
def moon_text():
    return MOON_PLAN


@pytest.fixture
def moon_plan():
    from rit.plan import parse_plan

    return parse_plan(MOON_PLAN)


CRITERIA = {
    1: "metric identities (two-score reduction, zero law, permutation invariance)",
    2: "hand values against arbitrary-precision oracle",
    3: "collection counts and 120-entry mixed set",
    4: "gate thresholds, dynamic schedule, bounded force-commit",
    5: "simulated commit rate matches exhaustive outcome tree",
    6: "byte-identical run logs (repeat and transcript replay)",
    7: "report fixtures reproduce the reference table cells",
    8: "live-model numbers out of scope; HTTP protocol conformance",
}
_outcomes: dict[int, list[bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes.setdefault(marker.args[0], []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, text in CRITERIA.items():
        results = _outcomes.get(n)
        status = "NOT RUN" if results is None else ("PASS" if all(results) else "FAIL")
        terminalreporter.write_line(f"criterion {n}: {status}  {text}")
