"""Compare media growth of a one-byte patch against rewriting the whole file.

    python scripts/patch_growth.py [--size 1000000]
"""

import argparse
import tempfile
from pathlib import Path

from cdfs import Device, DeviceGeometry, init_volume
from cdfs.fileio import MIN_STRIP, convert_to_fragmented, fopen, patch


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=1_000_000)
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        blocks = 4 * (args.size // 2048) + 64
        with Device.open_or_create(Path(tmp) / "patch.cdsim", DeviceGeometry.make(blocks, 2048)) as dev:
            v = init_volume(dev, b"patch")
            with fopen(v, 1, "big", "w") as s:
                s.write(bytes(args.size))
            base = dev.next_virgin
            convert_to_fragmented(v, 1, "big")
            converted = dev.next_virgin
            patch(v, 1, "big", args.size // 2, b"!")
            patched = dev.next_virgin
            with fopen(v, 1, "big", "w") as s:
                s.write(bytes(args.size))
            rewritten = dev.next_virgin
    print(f"convert to fragmented: {converted - base} blocks")
    print(f"one-byte patch:        {patched - converted} blocks (min strip {MIN_STRIP} bytes)")
    print(f"full rewrite:          {rewritten - patched} blocks")


if __name__ == "__main__":
    main()
