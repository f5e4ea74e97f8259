"""Sandboxed execution of one file-generation script.

The shim runs the script in a fresh process with its working directory set
to a dedicated directory, enforces wall-clock, memory, per-file-size, and
total-disk limits, denies network access, and reports exactly which
regular files appeared, as a single JSON object on stdout.

Script failure is data: the shim exits 0 whenever it ran, and the report's
exit_status / limit_violations carry the outcome.
"""

import argparse
import json
import os
import shutil
import signal
import subprocess
import sys
import tempfile
import time
from importlib import resources
from pathlib import Path

BOOTSTRAP = Path(__file__).parent / "bootstrap.py"

DEFAULT_TIMEOUT_S = 60.0
DEFAULT_MEM_BYTES = 1 << 30  # 1 GiB
DEFAULT_DISK_BYTES = 64 << 20  # 64 MiB
TAIL_BYTES = 4096


def load_manifest() -> dict:
    return json.loads(
        resources.files("sandbox_shim").joinpath("data/manifest.json").read_text()
    )


def check_declared(declared: list[str]) -> list[str]:
    """Names not covered by the manifest's library list."""
    known = set(load_manifest()["python_libraries"])
    return sorted(set(declared) - known)


def _snapshot(workdir: Path) -> dict:
    files = {}
    for path in workdir.rglob("*"):
        if path.is_file() and not path.is_symlink():
            files[str(path.relative_to(workdir))] = path.stat().st_size
    return files


def _tail(data: bytes) -> str:
    return data[-TAIL_BYTES:].decode("utf-8", errors="replace")


def run_script(script_path, workdir, *, timeout_s=DEFAULT_TIMEOUT_S,
               mem_bytes=DEFAULT_MEM_BYTES, disk_bytes=DEFAULT_DISK_BYTES,
               allow_net=False, python=None) -> dict:
    """Execute one script under limits; returns the report as a dict."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    control_dir = Path(tempfile.mkdtemp(prefix="shim_ctl_"))
    before = _snapshot(workdir)
    violations: list[str] = []

    argv = [
        python or sys.executable, str(BOOTSTRAP), str(script_path), str(workdir),
        str(control_dir), str(int(mem_bytes)), str(int(disk_bytes)),
        "1" if allow_net else "0",
    ]
    started = time.monotonic()
    proc = subprocess.Popen(argv, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                            start_new_session=True)
    try:
        stdout, stderr = proc.communicate(timeout=timeout_s)
        exit_status = proc.returncode
    except subprocess.TimeoutExpired:
        os.killpg(proc.pid, signal.SIGKILL)
        stdout, stderr = proc.communicate()
        exit_status = -int(signal.SIGKILL)
        violations.append("timeout")
    wall_time = round(time.monotonic() - started, 3)

    after = _snapshot(workdir)
    produced = sorted((name, size) for name, size in after.items()
                      if name not in before)

    new_bytes = sum(size for _, size in produced)
    if (new_bytes > disk_bytes or exit_status == -int(signal.SIGXFSZ)
            or b"File too large" in stderr):
        violations.append("disk")
    if (control_dir / "oom").exists() or b"MemoryError" in stderr:
        violations.append("memory")
    if (control_dir / "net_attempt").exists():
        violations.append("network-attempt")
    shutil.rmtree(control_dir, ignore_errors=True)

    return {
        "exit_status": exit_status,
        "wall_time": wall_time,
        "produced_files": [[name, size] for name, size in produced],
        "stdout_tail": _tail(stdout),
        "stderr_tail": _tail(stderr),
        "limit_violations": violations,
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sandbox-shim",
        description="Run one file-generation script in an isolated working "
                    "directory and report what it produced.",
    )
    parser.add_argument("--script", required=True)
    parser.add_argument("--workdir", required=True)
    parser.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT_S)
    parser.add_argument("--mem-bytes", type=int, default=DEFAULT_MEM_BYTES)
    parser.add_argument("--disk-bytes", type=int, default=DEFAULT_DISK_BYTES)
    parser.add_argument("--allow-net", action="store_true")
    parser.add_argument("--python", default=None,
                        help="interpreter of the provisioned sandbox environment")
    parser.add_argument("--declared", default="",
                        help="comma-separated libraries the script imports")
    args = parser.parse_args(argv)

    report = run_script(
        args.script, args.workdir, timeout_s=args.timeout,
        mem_bytes=args.mem_bytes, disk_bytes=args.disk_bytes,
        allow_net=args.allow_net, python=args.python,
    )
    declared = [d for d in args.declared.split(",") if d]
    unknown = check_declared(declared) if declared else []
    if unknown:
        report["stderr_tail"] = (
            f"[shim] libraries not in the environment manifest: {unknown}\n"
            + report["stderr_tail"]
        )[-TAIL_BYTES:]

    sys.stdout.write(json.dumps(report, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
