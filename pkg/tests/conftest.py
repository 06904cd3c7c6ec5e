import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion of the build")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        number, title = marker.args
        _ACCEPTANCE.append((number, title, rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome in sorted(_ACCEPTANCE):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"AC{number:>2} {status}  {title}")


def write_volume(tmp_path: Path, name: str, arr, spacing=(1.0, 1.0, 1.0), orientation=None, data_bytes=None):
    """Header + raw payload written by hand, bypassing the library's writer."""
    arr = np.asarray(arr, dtype="<i2")
    header = {
        "dims": list(arr.shape),
        "spacing_mm": list(spacing),
        "orientation": orientation or [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
        "dtype": "int16",
        "byte_order": "little-endian",
        "data_path": f"{name}.raw",
    }
    (tmp_path / f"{name}.raw").write_bytes(arr.tobytes(order="F") if data_bytes is None else data_bytes)
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(header))
    return path


@pytest.fixture
def volume_writer(tmp_path):
    def _write(name, arr, **kw):
        return write_volume(tmp_path, name, arr, **kw)

    return _write
