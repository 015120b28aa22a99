#!/usr/bin/env python3
"""Generate the guest record layout manifest.

Guest records use a 32-bit address model with 64-bit time_t and at most
8-byte alignment. ctypes computes the offsets so padding follows the same
rules a wasm32 C compiler applies.

    scripts/gen_layout_manifest.py > crates/core/layout/manifest.txt
    scripts/gen_layout_manifest.py --check crates/core/layout/manifest.txt
"""

import ctypes as C
import sys

addr = C.c_uint32
long32 = C.c_int32
ulong32 = C.c_uint32


class kstat(C.Structure):
    _fields_ = [
        ("dev", C.c_uint64),
        ("ino", C.c_uint64),
        ("mode", C.c_uint32),
        ("nlink", C.c_uint32),
        ("uid", C.c_uint32),
        ("gid", C.c_uint32),
        ("rdev", C.c_uint64),
        ("__pad1", C.c_uint64),
        ("size", C.c_int64),
        ("blksize", C.c_int32),
        ("__pad2", C.c_int32),
        ("blocks", C.c_int64),
        ("atime_sec", C.c_int64),
        ("atime_nsec", C.c_int64),
        ("mtime_sec", C.c_int64),
        ("mtime_nsec", C.c_int64),
        ("ctime_sec", C.c_int64),
        ("ctime_nsec", C.c_int64),
        ("__unused", C.c_uint32 * 2),
    ]


class iovec(C.Structure):
    _fields_ = [("base", addr), ("len", ulong32)]


class timespec(C.Structure):
    _fields_ = [("sec", C.c_int64), ("nsec", long32), ("__pad", C.c_int32)]


class timeval(C.Structure):
    _fields_ = [("sec", C.c_int64), ("usec", long32), ("__pad", C.c_int32)]


class ksigaction(C.Structure):
    _pack_ = 4
    _fields_ = [
        ("handler", addr),
        ("flags", ulong32),
        ("restorer", addr),
        ("mask", C.c_uint64),
    ]


class sigset(C.Structure):
    _fields_ = [("bits", C.c_uint64)]


RUSAGE_LONGS = [
    "maxrss", "ixrss", "idrss", "isrss", "minflt", "majflt", "nswap",
    "inblock", "oublock", "msgsnd", "msgrcv", "nsignals", "nvcsw", "nivcsw",
]


class rusage(C.Structure):
    _fields_ = [
        ("utime_sec", C.c_int64), ("utime_usec", long32), ("__pad0", C.c_int32),
        ("stime_sec", C.c_int64), ("stime_usec", long32), ("__pad1", C.c_int32),
    ] + [(n, long32) for n in RUSAGE_LONGS]


class rlimit(C.Structure):
    _fields_ = [("cur", C.c_uint64), ("max", C.c_uint64)]


class pollfd(C.Structure):
    _fields_ = [("fd", C.c_int32), ("events", C.c_int16), ("revents", C.c_int16)]


RECORDS = [kstat, iovec, timespec, timeval, ksigaction, sigset, rusage, rlimit, pollfd]

SIGNED = (C.c_int16, C.c_int32, C.c_int64)


def render():
    out = ["# Guest record layouts. Generated by scripts/gen_layout_manifest.py."]
    for rec in RECORDS:
        out.append(f"record {rec.__name__} size {C.sizeof(rec)}")
        for name, ty in rec._fields_:
            if name.startswith("__"):
                continue
            f = getattr(rec, name)
            sign = "s" if ty in SIGNED else "u"
            out.append(f"field {name} {f.offset} {f.size} {sign}")
    return "\n".join(out) + "\n"


def main(argv):
    text = render()
    if len(argv) == 3 and argv[1] == "--check":
        with open(argv[2]) as fh:
            if fh.read() != text:
                sys.stderr.write(f"{argv[2]} is stale\n")
                return 1
        return 0
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
