import pytest

from continuum.graph import Application, Infrastructure


def line_infra(lats=(10.0,), bws=None, cpu=8.0, ids=None):
    """Nodes n0..nk joined in a line; one latency (and bandwidth) per link."""
    n = len(lats) + 1
    ids = ids or [f"n{i}" for i in range(n)]
    infra = Infrastructure("line")
    for nid in ids:
        infra.add_node(nid, {"cpu": cpu, "ram": 8192, "processing_time": 1.0})
    bws = bws or [1000.0] * len(lats)
    for i, (lat, bw) in enumerate(zip(lats, bws)):
        infra.add_link(ids[i], ids[i + 1], {"latency": lat, "bandwidth": bw})
    return infra


def chain_app(app_id="app", n=2, cpu=1.0, lat=None, bw=None):
    app = Application(app_id)
    ids = [f"s{i}" for i in range(n)]
    for s in ids:
        app.add_service(s, {"cpu": cpu})
    req = {}
    if lat is not None:
        req["latency"] = lat
    if bw is not None:
        req["bandwidth"] = bw
    for a, b in zip(ids, ids[1:]):
        app.add_interaction(a, b, dict(req))
    if n > 1:
        app.add_flow(ids)
    return app


@pytest.fixture
def line3():
    return line_infra((10.0, 25.0))


def output_digests(root) -> dict[str, str]:
    """sha256 of every data file under a run tree; wall-clock timing and logs excluded."""
    import hashlib
    import json
    from pathlib import Path

    out = {}
    for p in sorted(Path(root).rglob("*")):
        if not p.is_file() or p.name == "logs.txt":
            continue
        data = p.read_bytes()
        if p.name == "report.json":
            report = json.loads(data)
            report.pop("timing", None)
            data = json.dumps(report, sort_keys=True).encode()
        out[str(p.relative_to(root))] = hashlib.sha256(data).hexdigest()
    return out


# -- acceptance reporting: one line per criterion -------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    n, title = marker
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "seen": False})
    if report.when == "call" or report.failed:
        entry["seen"] = True
        entry["ok"] = entry["ok"] and not report.failed



@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2} {status}  {e['title']}")
