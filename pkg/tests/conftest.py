import shutil
import subprocess
from pathlib import Path

import pytest

TOOLS = Path(__file__).parent / "tools"


def _compile(tmp_path_factory, name: str, extra_flags) -> Path:
    cc = shutil.which("gcc") or shutil.which("clang")
    if cc is None:
        pytest.skip("no C compiler available")
    build = tmp_path_factory.mktemp(name)
    binary = build / name
    cmd = [cc, "-O1", "-g", *extra_flags, "-o", str(binary), str(TOOLS / "toytarget.c")]
    proc = subprocess.run(cmd, capture_output=True)
    if proc.returncode != 0:
        pytest.skip(f"{name} build failed: {proc.stderr.decode()[:200]}")
    return binary


@pytest.fixture(scope="session")
def toy_target(tmp_path_factory):
    """Plain fast build of the toy target, fuzzed directly."""
    return _compile(tmp_path_factory, "toytarget", [])


@pytest.fixture(scope="session")
def toy_target_asan(tmp_path_factory):
    """ASAN build of the toy target, used to capture triage reports."""
    return _compile(tmp_path_factory, "toytarget_asan", ["-fsanitize=address"])


def _tool(name: str) -> str:
    path = TOOLS / name
    path.chmod(path.stat().st_mode | 0o111)
    return str(path)


@pytest.fixture(scope="session")
def minifuzz():
    return _tool("minifuzz.py")


@pytest.fixture(scope="session")
def toyshowmap():
    return _tool("toyshowmap.py")


@pytest.fixture(scope="session")
def toycmin():
    return _tool("toycmin.py")
