"""Child-process bootstrap: applies limits, then runs the user script.

Invoked by the shim as
    python bootstrap.py <script> <workdir> <control_dir> <mem_bytes> <fsize_bytes> <allow_net>

Marker files for violations land in the control directory, never in the
working directory, so they cannot pollute the produced-file listing.
"""

import errno
import os
import resource
import runpy
import socket
import sys
from pathlib import Path


def deny_network(control_dir: Path) -> None:
    marker = control_dir / "net_attempt"

    def blocked(*args, **kwargs):
        marker.touch()
        raise OSError(errno.EPERM, "network access denied by sandbox")

    socket.socket.connect = blocked
    socket.socket.connect_ex = blocked
    socket.socket.sendto = blocked
    socket.create_connection = blocked


def main() -> int:
    script, workdir, control, mem_bytes, fsize_bytes, allow_net = sys.argv[1:7]
    control_dir = Path(control)

    if int(mem_bytes) > 0:
        resource.setrlimit(resource.RLIMIT_AS, (int(mem_bytes), int(mem_bytes)))
    if int(fsize_bytes) > 0:
        resource.setrlimit(resource.RLIMIT_FSIZE, (int(fsize_bytes), int(fsize_bytes)))
    if allow_net != "1":
        deny_network(control_dir)

    os.chdir(workdir)
    try:
        runpy.run_path(script, run_name="__main__")
    except MemoryError:
        (control_dir / "oom").touch()
        raise
    except SystemExit as exc:
        return int(exc.code or 0) if isinstance(exc.code, (int, type(None))) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
