import asyncio

import pytest

from covertmesh.harness.emulator import LinkSpec, VirtualNetwork


def two_hosts(delay_ms=10.0, seed=0, **link):
    net = VirtualNetwork(seed)
    net.add_link(LinkSpec("a", "b", delay_ms, **link))
    return net


async def connected_pair(net, port=5000):
    """(client reader, client writer, server reader, server writer) across a-b."""
    accepted = asyncio.get_running_loop().create_future()

    async def on_conn(r, w):
        accepted.set_result((r, w))

    await net.host("b").start_server(on_conn, port)
    cr, cw = await net.host("a").open_connection("b", port)
    sr, sw = await accepted
    return cr, cw, sr, sw


# acceptance summary: one PASS/FAIL line per @pytest.mark.criterion test

_criteria: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result().criterion = tuple(m.args)


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    # a setup failure (e.g. in a shared fixture) also counts against the criterion
    if report.when == "call" or (report.failed and marker[0] not in _criteria):
        n, title = marker
        detail = dict(report.user_properties).get("detail", "")
        _criteria[n] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, verdict, detail = _criteria[n]
        line = f"criterion {n:>2} {verdict}  {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
