"""Nominal throughput as the network grows and as load rises.

Run: python3 demos/throughput.py
"""

from fractions import Fraction

from wchain.config import ScenarioConfig
from wchain.harness import run_scenario


def tps(n: int, rate: int, duration: int = 150) -> float:
    cfg = ScenarioConfig(n=n, f=(n - 1) // 3, seed=1, arrival_rate=Fraction(rate), duration_ticks=duration)
    return run_scenario(cfg).metrics.tps


def main() -> None:
    print("by network size, 4 messages per tick")
    for n in (4, 7, 13):
        print(f"  n={n:<3} {tps(n, 4):8.0f} tx/s")
    print("by arrival rate, n=4")
    for rate in (1, 2, 4, 8, 12):
        print(f"  rate={rate:<3} {tps(4, rate):8.0f} tx/s")


if __name__ == "__main__":
    main()
