"""End-to-end benchmark-table reproduction: fetch the public test set,
run the fusion enhancer over it, and score raws vs enhanced output into
the summary table layout.

Needs network on the first run (or a warm AQUAFUSE_CACHE). Writes
everything under --out.

Usage: python scripts/u45_table.py --out runs/u45
"""
import argparse
import sys
from pathlib import Path

from aquafuse import cli, dataset


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/u45")
    parser.add_argument("--url", default=dataset.DATASET_URL)
    parser.add_argument("--cache", default=None)
    parser.add_argument("--weights", default=None,
                        help="optionally also score a trained enhancement network")
    args = parser.parse_args(argv)

    out = Path(args.out)
    try:
        raw_root = dataset.fetch_u45(url=args.url, cache_dir=args.cache)
    except dataset.FetchError as exc:
        print(f"dataset unavailable: {exc}", file=sys.stderr)
        return 1

    fe_dir = out / "fe"
    for subset in dataset.SUBSETS:
        rc = cli.main(["enhance", "--method", "fe",
                       "--out", str(fe_dir / subset), str(raw_root / subset)])
        if rc != 0:
            print(f"enhancement reported per-file errors in subset {subset}", file=sys.stderr)
    score_dirs = [str(raw_root), str(fe_dir)]
    if args.weights:
        net_dir = out / "fgan"
        for subset in dataset.SUBSETS:
            cli.main(["enhance", "--method", "fgan", "--weights", args.weights,
                      "--out", str(net_dir / subset), str(raw_root / subset)])
        score_dirs.append(str(net_dir))
    return cli.main(["score", "--out", str(out / "scores")] + score_dirs)


if __name__ == "__main__":
    sys.exit(main())
