#!/usr/bin/env python3
"""Write a synthetic ratings file in the `::`-separated MovieLens format.

Useful for exercising the real file-ingestion path or pointing the CLI at a
dataset of a chosen size:

    python scripts/make_ratings_file.py --users 1380 --items 1000 --out ratings.dat
"""

import argparse
import sys

from twostage_cltr.dataset import synthesize_ratings, write_ratings_file


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--users", type=int, default=1380)
    parser.add_argument("--items", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--avg-ratings", type=float, default=80.0)
    parser.add_argument("--out", required=True)
    args = parser.parse_args()

    table = synthesize_ratings(args.users, args.items, seed=args.seed,
                               avg_ratings_per_user=args.avg_ratings)
    write_ratings_file(table, args.out)
    print(f"wrote {len(table)} ratings ({table.n_users} users x {table.n_items} items) to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
