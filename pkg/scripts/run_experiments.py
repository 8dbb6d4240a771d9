#!/usr/bin/env python3
"""Run the desk-scale protocol end to end and write results.json + summary.md.

The summary compares held-out matching against the published reference figures.
Defaults take roughly half an hour on one CPU core; --quick shrinks everything
for a smoke run whose numbers are not meaningful.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging

import torch

from semfeat.experiments import Protocol, run_all


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="reports/desk", help="output directory")
    ap.add_argument("--quick", action="store_true", help="tiny corpora and few epochs")
    ap.add_argument("--threads", type=int, default=1)
    for f in dataclasses.fields(Protocol):
        if f.type in ("int", "float"):
            ap.add_argument("--" + f.name.replace("_", "-"), type=int if f.type == "int" else float, default=None)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(args.threads)

    p = Protocol()
    if args.quick:
        p = dataclasses.replace(p, overfit_pairs=4, overfit_epochs=4, warmup_epochs=1, finetune_pairs=8,
                                finetune_epochs=1, heldout_pairs=4, dynamic_pairs=4)
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(Protocol) if getattr(args, f.name, None) is not None}
    p = dataclasses.replace(p, **overrides)

    run_all(p, args.out)
    with open(f"{args.out}/summary.md") as fh:
        print(fh.read())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
