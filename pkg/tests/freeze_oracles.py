"""Regenerate tests/data/rdp_oracle.json from the mpmath quadrature oracle.

Slow (about a minute per curve); run by hand when the order grid changes:
    python tests/freeze_oracles.py
"""

import json
from pathlib import Path

from dpmlbench.accountant import DEFAULT_ORDERS

from oracles import subsampled_gaussian_rdp

CASES = [(0.01, 1.1), (0.05, 0.8), (0.05, 1.5), (0.2, 2.0)]


def main():
    out = []
    for q, sigma in CASES:
        vals = [subsampled_gaussian_rdp(q, sigma, a, dps=30) for a in DEFAULT_ORDERS]
        out.append({"q": q, "sigma": sigma, "orders": list(DEFAULT_ORDERS), "rdp": vals})
        print(f"q={q} sigma={sigma} done")
    path = Path(__file__).parent / "data" / "rdp_oracle.json"
    path.write_text(json.dumps(out, indent=1) + "\n")


if __name__ == "__main__":
    main()
