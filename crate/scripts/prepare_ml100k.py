#!/usr/bin/env python3
"""Fetch MovieLens-100K and write an implicit-feedback train/test split.

Every rating counts as an interaction. Each user's interactions are split
80/20 at random (seeded); training rows keep timestamp order, and test items
that never occur in training are dropped.

The ratings file is taken from the RecBole wheel on PyPI, which bundles
ml-100k as an example dataset, so only pip access is needed. MovieLens data
is subject to the GroupLens usage terms; the output is not meant to be
committed.

    python3 scripts/prepare_ml100k.py [--out data/ml-100k] [--seed 2021]
"""

import argparse
import collections
import io
import pathlib
import random
import subprocess
import sys
import tempfile
import zipfile

MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def fetch_inter(cache: pathlib.Path) -> str:
    wheels = sorted(cache.glob("recbole-*.whl"))
    if not wheels:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "recbole==1.2.1", "--no-deps", "-d", str(cache)],
            check=True,
        )
        wheels = sorted(cache.glob("recbole-*.whl"))
    with zipfile.ZipFile(wheels[-1]) as zf:
        return zf.read(MEMBER).decode("utf-8")


def parse(text: str):
    rows = []
    reader = io.StringIO(text)
    header = reader.readline().rstrip("\n").split("\t")
    if header[:2] != ["user_id:token", "item_id:token"]:
        raise SystemExit(f"unexpected header {header}")
    for line in reader:
        user, item, _rating, ts = line.rstrip("\n").split("\t")
        rows.append((int(user), int(item), float(ts)))
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/ml-100k")
    ap.add_argument("--seed", type=int, default=2021)
    ap.add_argument("--test-fraction", type=float, default=0.2)
    ap.add_argument("--cache", default=None, help="directory holding (or receiving) the wheel")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        cache = pathlib.Path(args.cache or tmp)
        cache.mkdir(parents=True, exist_ok=True)
        rows = parse(fetch_inter(cache))

    by_user = collections.defaultdict(list)
    for user, item, ts in rows:
        by_user[user].append((ts, item))

    rng = random.Random(args.seed)
    train, test = {}, {}
    for user in sorted(by_user):
        events = sorted(by_user[user])
        items = list(dict.fromkeys(i for _, i in events))
        shuffled = items[:]
        rng.shuffle(shuffled)
        n_test = min(round(len(items) * args.test_fraction), len(items) - 1)
        held = set(shuffled[:n_test])
        train[user] = [i for i in items if i not in held]
        test[user] = sorted(held)

    known = {i for items in train.values() for i in items}
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train.txt", "w") as f:
        for user, items in train.items():
            f.write(" ".join(map(str, [user, *items])) + "\n")
    dropped = 0
    with open(out / "test.txt", "w") as f:
        for user, items in test.items():
            kept = [i for i in items if i in known]
            dropped += len(items) - len(kept)
            if kept:
                f.write(" ".join(map(str, [user, *kept])) + "\n")
    n_train = sum(map(len, train.values()))
    n_test = sum(map(len, test.values())) - dropped
    print(f"{len(train)} users, {len(known)} items, {n_train} train / {n_test} test interactions "
          f"({dropped} cold test items dropped) -> {out}")


if __name__ == "__main__":
    main()
