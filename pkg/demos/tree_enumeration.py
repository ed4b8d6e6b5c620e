"""Candidate communication trees and transmitter-compromise resilience.

Counts spanning arborescences of a few graphs by enumeration and by the
matrix-tree determinant, then checks how many trees stay usable as more
transmitters on a complete graph are compromised.

    python demos/tree_enumeration.py
"""
import itertools

from gridswitch.comm import (CommGraph, DeviceHealth, admissible_mask, build_tree_set,
                             count_arborescences, enumerate_arborescences)


def main():
    for name, g in [("ring:5", CommGraph.ring(5)), ("complete:5", CommGraph.complete(5))]:
        listed = len(enumerate_arborescences(g, 0))
        print(f"{name:11s} root 1: enumerated {listed:4d}, matrix-tree {count_arborescences(g, 0):4d}")

    n = 5
    trees = build_tree_set(CommGraph.complete(n))
    print(f"\ncomplete:{n}, {len(trees)} trees over all roots")
    for k in range(n):
        worst = min(admissible_mask(trees, DeviceHealth(frozenset(bad))).sum()
                    for bad in itertools.combinations(range(n), k))
        print(f"  {k} compromised transmitters: at least {worst} usable trees")


if __name__ == "__main__":
    main()
