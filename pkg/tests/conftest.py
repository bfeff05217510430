import copy
import json

import pytest

from gridlan.topology import load_topology, resolve_config_path, topology_from_dict


@pytest.fixture(scope="session")
def paper_dict():
    return json.loads(resolve_config_path("paper").read_text(encoding="utf-8"))


@pytest.fixture
def paper_raw(paper_dict):
    """A fresh, mutable copy of the bundled config."""
    return copy.deepcopy(paper_dict)


@pytest.fixture(scope="session")
def paper():
    return load_topology("paper")


def make_topology(clients, server_id="server", **extra):
    """Small topology builder: ``clients`` is a list of (id, cores, rtt, overhead) tuples."""
    data = {
        "server": {"id": server_id, "services": {
            "address_assignment": True, "kernel_transfer": True,
            "root_filesystem": True, "queue_manager": True}},
        "clients": [],
        "nodes": [],
    }
    for cid, cores, rtt, overhead, *rest in clients:
        c = {"id": cid, "cores": cores, "client_rtt_mean_us": rtt,
             "client_rtt_jitter_us": 0, "overhead_rtt_us": overhead}
        if rest:
            c.update(rest[0])
        data["clients"].append(c)
        data["nodes"].append({"client_id": cid, "vcores": cores})
    data.update(extra)
    return topology_from_dict(data)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(number, title, ok, detail=""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
