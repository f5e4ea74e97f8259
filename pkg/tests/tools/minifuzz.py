#!/usr/bin/env python3
"""Minimal external fuzzer used by campaign tests.

Speaks both driver contracts:
  minifuzz.py -i corpus -o out -F argvfile -- target        (option-aware)
  minifuzz.py -i corpus -o out -- target [args... with @@]  (plain)

AFL-style output layout: out/queue, out/crashes/id:NNNNNN, out/fuzzer_stats.
Runs a deterministic byte-substitution stage over each seed, then random
havoc, until killed.
"""

import argparse
import os
import random
import shutil
import signal
import subprocess
import sys
import tempfile
import time
from pathlib import Path


def parse_argv_line(line):
    tokens, cur, escaped = [], [], False
    for ch in line.rstrip("\n"):
        if escaped:
            cur.append(ch)
            escaped = False
        elif ch == "\\":
            escaped = True
        elif ch == " ":
            if cur:
                tokens.append("".join(cur))
                cur = []
        else:
            cur.append(ch)
    if cur:
        tokens.append("".join(cur))
    return tokens


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("-i", dest="corpus", required=True)
    ap.add_argument("-o", dest="out", required=True)
    ap.add_argument("-F", dest="argv_file")
    ap.add_argument("rest", nargs=argparse.REMAINDER)
    args = ap.parse_args()

    rest = args.rest
    if rest and rest[0] == "--":
        rest = rest[1:]
    if not rest:
        print("minifuzz: no target given", file=sys.stderr)
        return 2
    target = rest[0]

    if args.argv_file:
        tokens = parse_argv_line(Path(args.argv_file).read_text(encoding="utf-8").splitlines()[0])
        target_args = tokens[1:]  # drop the program token
    else:
        target_args = rest[1:]
    if "@@" not in target_args:
        print("minifuzz: argv lacks @@", file=sys.stderr)
        return 2

    out = Path(args.out)
    queue = out / "queue"
    crashes = out / "crashes"
    queue.mkdir(parents=True, exist_ok=True)
    crashes.mkdir(parents=True, exist_ok=True)

    seeds = [p for p in sorted(Path(args.corpus).iterdir()) if p.is_file()]
    if not seeds:
        print("minifuzz: empty corpus", file=sys.stderr)
        return 2
    for i, s in enumerate(seeds):
        shutil.copyfile(s, queue / f"id:{i:06d},orig")

    env = dict(os.environ)
    env["ASAN_OPTIONS"] = env.get("ASAN_OPTIONS", "") + ":abort_on_error=1:symbolize=1"
    workfile = Path(tempfile.mkdtemp(prefix="minifuzz_")) / "cur"

    execs = 0
    crash_count = 0
    start = time.time()

    def run_one(data: bytes) -> bool:
        nonlocal execs, crash_count
        execs += 1
        workfile.write_bytes(data)
        argv = [target] + [str(workfile) if t == "@@" else t for t in target_args]
        try:
            proc = subprocess.run(argv, env=env, stdout=subprocess.DEVNULL,
                                  stderr=subprocess.DEVNULL, timeout=5)
        except subprocess.TimeoutExpired:
            return False
        if proc.returncode < 0 and proc.returncode != -signal.SIGTERM:
            crashes.joinpath(f"id:{crash_count:06d},sig:{-proc.returncode:02d}").write_bytes(data)
            crash_count += 1
            write_stats()
            return True
        return False

    def write_stats():
        out.joinpath("fuzzer_stats").write_text(
            f"execs_done        : {execs}\n"
            f"unique_crashes    : {crash_count}\n"
            f"start_time        : {int(start)}\n"
        )

    write_stats()
    rng = random.Random(0xF00D)
    corpus_data = [s.read_bytes() for s in seeds]

    # deterministic stage: every byte value at every position
    for data in corpus_data:
        for pos in range(len(data)):
            for val in range(256):
                mutated = bytearray(data)
                mutated[pos] = val
                run_one(bytes(mutated))
            write_stats()

    # havoc stage: random stacked mutations, runs until killed
    while True:
        data = bytearray(rng.choice(corpus_data))
        for _ in range(rng.randrange(1, 8)):
            kind = rng.randrange(3)
            if kind == 0 and data:
                data[rng.randrange(len(data))] = rng.randrange(256)
            elif kind == 1:
                data += bytes([rng.randrange(256)])
            elif kind == 2 and len(data) > 1:
                del data[rng.randrange(len(data))]
        if data:
            run_one(bytes(data))
        if execs % 500 == 0:
            write_stats()


if __name__ == "__main__":
    sys.exit(main())
