#!/usr/bin/env python3
"""Convert the raw UCI Adult files into the layout configs/adult_schema.yaml expects.

Raw files come from https://archive.ics.uci.edu/ml/datasets/adult
(adult.data and adult.test).  Rows containing '?' are dropped, the redundant
fnlwgt and education-string columns removed, and the trailing period on test
labels stripped; that leaves 30162 training and 15060 test records.
"""

import argparse
import csv
import os

RAW_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education_num", "marital_status",
    "occupation", "relationship", "race", "sex", "capital_gain", "capital_loss",
    "hours_per_week", "native_country", "income",
]
KEEP = [
    "age", "workclass", "education_num", "marital_status", "occupation",
    "relationship", "race", "sex", "capital_gain", "capital_loss",
    "hours_per_week", "native_country", "income",
]


def convert(src: str, dst: str) -> int:
    kept = 0
    keep_idx = [RAW_COLUMNS.index(c) for c in KEEP]
    with open(src, encoding="utf-8") as fin, open(dst, "w", newline="", encoding="utf-8") as fout:
        writer = csv.writer(fout)
        writer.writerow(KEEP)
        for line in fin:
            line = line.strip()
            if not line or line.startswith("|"):  # test file banner line
                continue
            cells = [c.strip().rstrip(".") for c in line.split(",")]
            if len(cells) != len(RAW_COLUMNS) or "?" in cells:
                continue
            writer.writerow([cells[i] for i in keep_idx])
            kept += 1
    return kept


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("train", help="raw adult.data path")
    parser.add_argument("test", help="raw adult.test path")
    parser.add_argument("outdir", help="directory for adult_train.csv / adult_test.csv")
    args = parser.parse_args()

    os.makedirs(args.outdir, exist_ok=True)
    n_train = convert(args.train, os.path.join(args.outdir, "adult_train.csv"))
    n_test = convert(args.test, os.path.join(args.outdir, "adult_test.csv"))
    print(f"train: {n_train} records, test: {n_test} records")


if __name__ == "__main__":
    main()
