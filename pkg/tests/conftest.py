import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Record one sub-check of an acceptance criterion for the final summary."""
    book = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(criterion, title, ok, detail):
        entry = book.setdefault(criterion, {"title": title, "checks": []})
        entry["checks"].append((bool(ok), detail))
    return record


def pytest_terminal_summary(terminalreporter, config):
    book = config.stash.get(_ACCEPTANCE_KEY, {})
    if not book:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(book):
        entry = book[criterion]
        verdict = "PASS" if all(ok for ok, _ in entry["checks"]) else "FAIL"
        details = "; ".join(detail for _, detail in entry["checks"])
        terminalreporter.write_line(f"{verdict} criterion {criterion}: {entry['title']} ({details})")
