#!/usr/bin/env python3
"""Convert a MATPOWER case file (.m) into the bus/branch/gen CSV tables evplan reads.

    python3 scripts/matpower_to_csv.py case9.m out_dir [--lmp 0.05] [--lmp-bus 5=0.052 ...]

Loads and generation are converted to per unit on the case's baseMVA. Out-of-service
branches and generators are dropped. LMPs come from the bus lam_P column when the
case carries OPF results ($/MWh, converted to $/kWh), otherwise from --lmp, with
per-bus overrides from --lmp-bus. Participation factors are proportional to Pmax.
"""

import argparse
import csv
import os
import re
import sys


def matrix(text, name):
    m = re.search(r"mpc\." + name + r"\s*=\s*\[(.*?)\];", text, re.S)
    if not m:
        return []
    rows = []
    for line in m.group(1).splitlines():
        line = line.split("%", 1)[0].strip().rstrip(";").strip()
        if line:
            rows.append([float(v) for v in line.split()])
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("case")
    ap.add_argument("out")
    ap.add_argument("--lmp", type=float, default=0.05, help="default LMP, currency/kWh")
    ap.add_argument("--lmp-bus", action="append", default=[], metavar="BUS=LMP")
    args = ap.parse_args()

    text = open(args.case).read()
    base = re.search(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)", text)
    base_mva = float(base.group(1)) if base else 100.0
    buses, branches, gens = matrix(text, "bus"), matrix(text, "branch"), matrix(text, "gen")
    if not buses:
        sys.exit("no mpc.bus matrix found")

    overrides = {}
    for item in args.lmp_bus:
        bus, value = item.split("=")
        overrides[int(bus)] = float(value)

    kinds = {1: "pq", 2: "pv", 3: "slack"}
    vm_set = {int(g[0]): g[5] for g in gens if len(g) > 7 and g[7] > 0}
    os.makedirs(args.out, exist_ok=True)

    with open(os.path.join(args.out, "bus.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "type", "p_load", "q_load", "vm", "gs", "bs", "lmp"])
        for b in buses:
            bid = int(b[0])
            lmp = b[13] / 1000.0 if len(b) > 13 else args.lmp
            lmp = overrides.get(bid, lmp)
            vm = vm_set.get(bid, b[7])
            w.writerow([bid, kinds[int(b[1])], b[2] / base_mva, b[3] / base_mva, vm, b[4] / base_mva, b[5] / base_mva, lmp])

    with open(os.path.join(args.out, "branch.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["from", "to", "r", "x", "b"])
        for br in branches:
            if len(br) > 10 and br[10] == 0:
                continue
            w.writerow([int(br[0]), int(br[1]), br[2], br[3], br[4]])

    live = [g for g in gens if len(g) <= 7 or g[7] > 0]
    pmax_total = sum(g[8] for g in live if len(g) > 8) or float(len(live))
    with open(os.path.join(args.out, "gen.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bus", "p", "q", "participation"])
        for g in live:
            share = (g[8] if len(g) > 8 else 1.0) / pmax_total
            w.writerow([int(g[0]), g[1] / base_mva, g[2] / base_mva, share])


if __name__ == "__main__":
    main()
