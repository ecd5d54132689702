import pytest

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    number = getattr(item.function, "criterion", None)
    if number is None:
        return
    failed = rep.failed
    if rep.when == "call" or (failed and number not in _ACCEPTANCE):
        detail = dict(item.user_properties).get("detail", "")
        if failed and not detail:
            detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
        _ACCEPTANCE[number] = ("FAIL" if failed else "PASS", item.function.title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        verdict, title, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{verdict}  criterion {number:2d}  {title}: {detail}")
