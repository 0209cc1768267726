"""Measure read probes per mount as the written prefix of a large image grows.

    python scripts/mount_probes.py [--capacity 262144] [--trials 100] [--seed 1]

Each trial commits one transaction that ends near a random prefix length,
then mounts from scratch and records the device probe counter.
"""

import argparse
import math
import random
import tempfile
from pathlib import Path

from cdfs import Device, DeviceGeometry, init_volume, mount
from cdfs.fileio import fopen


def main() -> None:
    ap = argparse.ArgumentParser(description="mount probe counts vs written prefix")
    ap.add_argument("--capacity", type=int, default=262_144)
    ap.add_argument("--block-size", type=int, default=2048)
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    targets = sorted(rng.randrange(1, args.capacity - 8) for _ in range(args.trials))
    bound = 2 + math.ceil(math.log2(args.capacity))
    worst = 0
    with tempfile.TemporaryDirectory() as tmp:
        geometry = DeviceGeometry.make(args.capacity, args.block_size)
        with Device.open_or_create(Path(tmp) / "probe.cdsim", geometry) as dev:
            v = init_volume(dev, b"probe")
            print(f"{'prefix':>8} {'probes':>6}")
            for i, target in enumerate(targets):
                room = target - v.next_write - 3
                if room > 0:
                    with fopen(v, 1, f"f{i}", "w") as s:
                        s.write(bytes(room * v.block_size - 256))
                    v.commit()
                m = mount(dev)
                worst = max(worst, m.mount_probes)
                print(f"{m.next_write:>8} {m.mount_probes:>6}")
    print(f"worst {worst}, bound 1 + ceil(log2 capacity) + 1 = {bound}")


if __name__ == "__main__":
    main()
