from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_REPORT: dict[int, str] = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    """Record the one-line outcome of an acceptance criterion."""
    _REPORT[criterion] = f"CRITERION {criterion}: {'PASS' if ok else 'FAIL'} {detail}"
    print(_REPORT[criterion])


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_REPORT):
            terminalreporter.write_line(_REPORT[k])
