"""Convergence time of the idealized loop as the stiffness gain floor grows.

Usage: python3 demos/gain_trend.py
"""

from rotctl import scenario as scen
from rotctl.sim import convergence_metrics, run_closed_loop


def main() -> None:
    base = scen.load_any("gain_sweep")
    print(f"{'k_theta':>9} {'t_conv[s]':>10} {'rate[1/s]':>10} {'R^2':>7}")
    for k in (1e3, 1e4, 1e5):
        config = scen.set_override(base, f"gains.k_theta={k}")
        res = run_closed_loop(scen.build(config, name="gain_sweep"))
        m = convergence_metrics(res)
        print(f"{k:9.0e} {res.convergence_time:10.4f} {m.decay_rate:10.2f} {m.r_squared:7.4f}")


if __name__ == "__main__":
    main()
