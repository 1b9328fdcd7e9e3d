"""Closed-loop replication of open-loop equilibrium shapes at several pressures.

Usage: python3 demos/replicate_arcs.py [seed]
"""

import sys

from rotctl import scenario as scen
from rotctl.sim import run_closed_loop


def main(seed: int = 0) -> None:
    print(f"{'target':>8} {'status':>10} {'t_conv[s]':>10} {'err':>7} {'P1[kPa]':>8} {'P2[kPa]':>8}")
    for kpa in (5, 10, 20, 30):
        name = f"arc_replication_{kpa}kpa"
        res = run_closed_loop(scen.build(scen.load_any(name), seed=seed, name=name))
        p1, p2 = res.pressures[-1] / 1e3
        t_conv = "-" if res.convergence_time is None else f"{res.convergence_time:.2f}"
        print(f"{kpa:>5}kPa {res.status:>10} {t_conv:>10} {res.err_norm[-1]:7.3f} {p1:8.2f} {p2:8.2f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
