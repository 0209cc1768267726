"""Write two small files in one transaction, rewrite one, and print the block map.

    python scripts/layout_demo.py [--image PATH]
"""

import argparse
import tempfile
from pathlib import Path

from cdfs import Device, DeviceGeometry, fsck, init_volume
from cdfs.fileio import fopen


def put(v, name: str, data: bytes) -> None:
    with fopen(v, 1, name, "w") as s:
        s.write(data)


def block_map(v) -> list[str]:
    rep = fsck(v)
    return [f"{o:>3}  {v.scheme.format(v.address(o)):<16} {rep.blocks[o].kind}"
            for o in sorted(rep.blocks)]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--image", type=Path, help="image path (default: a temporary file)")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        path = args.image or Path(tmp) / "layout.cdsim"
        with Device.open_or_create(path, DeviceGeometry.make(64, 2048)) as dev:
            v = init_volume(dev, b"demo")
            put(v, "life.c", b"#include <stdio.h>\n" * 158)  # spills into a second block
            put(v, "wheel.c", b"/* wheel */\n" * 83)
            v.commit()
            print("after the first transaction:")
            print("\n".join(block_map(v)))
            first = [dev.read_block(o).data for o in range(v.next_write)]
            put(v, "life.c", b"int main(void) { return 0; }\n" * 100)
            v.commit()
            print("\nafter rewriting life.c:")
            print("\n".join(block_map(v)))
            same = all(dev.read_block(o).data == b for o, b in enumerate(first))
            print(f"\nfirst {len(first)} blocks unchanged: {same}")


if __name__ == "__main__":
    main()
