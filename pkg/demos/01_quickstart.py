"""Minimal library usage: load a config, run it, look at the metrics.

Run from the repository root:

    python3 demos/01_quickstart.py
"""

import os

from sybilsim.config import load_config
from sybilsim.engine import run_simulation

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    cfg = load_config(os.path.join(HERE, "configs", "quickstart.yaml"))
    print(f"{cfg.honest_nodes} nodes, {cfg.rounds} rounds, rule {cfg.aggregator}")

    result = run_simulation(cfg)

    print(f"graph: {len(result.topology.edges)} edges, "
          f"{result.message_counts[0]} messages per round")
    print("round  mean accuracy")
    for m in result.metrics[:: max(1, cfg.rounds // 10)]:
        print(f"{m.round:5d}  {m.mean_accuracy:.3f}")
    print(f"final  {result.metrics[-1].mean_accuracy:.3f}")


if __name__ == "__main__":
    main()
