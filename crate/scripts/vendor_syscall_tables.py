#!/usr/bin/env python3
"""Regenerate the vendored syscall tables under crates/atlas/tables/.

The source is the `syscalls` crate (0.8.1), whose per-architecture enums are
generated from the Linux kernel's syscall tables. The output uses the kernel's
`syscall.tbl` column layout: <number> <abi> <name> <entry point>.

usage: vendor_syscall_tables.py <path-to-unpacked-syscalls-crate>
"""
import hashlib
import pathlib
import re
import sys

ARCHES = {"x86_64": "x86_64", "aarch64": "arm64", "riscv64": "riscv64"}
ENTRY = re.compile(r"^\s+([a-z0-9_]+)\s*=\s*(\d+),\s*$")

# The crate's aarch64 enum is generated from asm-generic/unistd.h without the
# __BITS_PER_LONG == 32 guards: it carries the 32-bit-only time64 block
# (403..=423) and names nr 79 by its 32-bit alias. The 64-bit kernel ABI has
# neither; correct both here so the tables match arch/arm64.
FIXUPS = {
    "aarch64": {"drop": range(403, 424), "rename": {"fstatat": "newfstatat"}},
}


def main() -> None:
    src = pathlib.Path(sys.argv[1])
    out = pathlib.Path(__file__).resolve().parent.parent / "crates" / "atlas" / "tables"
    out.mkdir(parents=True, exist_ok=True)
    for rust_arch, kernel_arch in ARCHES.items():
        text = (src / "src" / "arch" / f"{rust_arch}.rs").read_text()
        rows = [(int(m.group(2)), m.group(1)) for m in map(ENTRY.match, text.splitlines()) if m]
        fix = FIXUPS.get(rust_arch, {})
        rows = [
            (nr, fix.get("rename", {}).get(name, name))
            for nr, name in rows
            if nr not in fix.get("drop", ())
        ]
        rows.sort()
        lines = [
            f"# {kernel_arch} syscall table",
            f"# derived from syscalls-0.8.1 src/arch/{rust_arch}.rs "
            f"(sha256 {hashlib.sha256(text.encode()).hexdigest()})",
            "#",
            "# <number> <abi> <name> <entry point>",
        ]
        lines += [f"{nr}\tcommon\t{name}\tsys_{name}" for nr, name in rows]
        (out / f"{kernel_arch}.tbl").write_text("\n".join(lines) + "\n")
        print(f"{kernel_arch}: {len(rows)} entries")


if __name__ == "__main__":
    main()
