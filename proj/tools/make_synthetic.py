"""Generate the bundled block-structured synthetic ratings file.

Users and items fall into equal-sized groups. A user rates items of their own
group highly with probability `p_in` and other items with probability
`p_out`; a share of extra low ratings checks that binarization drops them.
"""
import argparse
import csv
from pathlib import Path

import numpy as np


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--users", type=int, default=200)
    parser.add_argument("--items", type=int, default=80)
    parser.add_argument("--groups", type=int, default=4)
    parser.add_argument("--p-in", type=float, default=0.5)
    parser.add_argument("--p-out", type=float, default=0.03)
    parser.add_argument("--p-low", type=float, default=0.05)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--out", type=Path,
                        default=Path(__file__).resolve().parent.parent / "data" / "synthetic.csv")
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    user_group = np.arange(args.users) % args.groups
    item_group = np.arange(args.items) % args.groups
    rows = []
    timestamp = 1_000_000_000
    for u in range(args.users):
        for i in range(args.items):
            p = args.p_in if user_group[u] == item_group[i] else args.p_out
            draw = rng.random()
            if draw < p:
                rating = int(rng.integers(4, 6))
            elif draw < p + args.p_low:
                rating = int(rng.integers(1, 4))
            else:
                continue
            timestamp += 1
            rows.append((f"u{u}", f"i{i}", rating, timestamp))

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["user", "item", "rating", "timestamp"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} ratings to {args.out}")


if __name__ == "__main__":
    main()
