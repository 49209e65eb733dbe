#!/usr/bin/env python3
"""Fetch MovieLens-100k ratings and write them as `user,item,rating,timestamp` CSV.

GroupLens is tried first. When it is unreachable, the copy bundled inside the
RecBole wheel is pulled through pip instead.
"""
import argparse
import csv
import io
import pathlib
import subprocess
import sys
import tempfile
import urllib.request
import zipfile

GROUPLENS_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"


def from_grouplens():
    with urllib.request.urlopen(GROUPLENS_URL, timeout=20) as resp:
        payload = resp.read()
    with zipfile.ZipFile(io.BytesIO(payload)) as zf:
        text = zf.read("ml-100k/u.data").decode("utf-8")
    return [line.split("\t") for line in text.splitlines() if line.strip()]


def from_recbole_wheel():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "recbole==1.2.1",
             "--no-deps", "-q", "-d", tmp],
            check=True)
        wheel = next(pathlib.Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            text = zf.read("recbole/dataset_example/ml-100k/ml-100k.inter").decode("utf-8")
    lines = text.splitlines()[1:]
    return [line.split("\t") for line in lines if line.strip()]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="data/ml-100k/ratings.csv")
    args = parser.parse_args()
    out = pathlib.Path(args.out)
    if out.exists():
        print(f"{out} already present")
        return 0
    try:
        rows = from_grouplens()
    except Exception as exc:  # noqa: BLE001
        print(f"grouplens unavailable ({exc}); using RecBole wheel", file=sys.stderr)
        rows = from_recbole_wheel()
    if len(rows) != 100000:
        print(f"unexpected record count {len(rows)}", file=sys.stderr)
        return 1
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(".tmp")
    with tmp.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user", "item", "rating", "timestamp"])
        for user, item, rating, ts in rows:
            writer.writerow([user, item, int(float(rating)), int(float(ts))])
    tmp.rename(out)
    print(f"wrote {len(rows)} ratings to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
