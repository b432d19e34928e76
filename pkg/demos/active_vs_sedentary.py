"""Two players, two games, one passive speed mechanic.

Player A walks 10,000 steps every evening for three days; player B never
moves. Both then open an endless runner and a kart game that map the
PHYSICAL score onto a speed multiplier in [0.8, 1.2). The scenario is
illustrative: it shows the reciprocal loop, it is not calibrated against
any measured data.

    python3 demos/active_vs_sedentary.py
"""

from __future__ import annotations

import tempfile

from lifesync.sim.harness import active_vs_sedentary, run_scenario_local


def main() -> int:
    with tempfile.TemporaryDirectory(prefix="lsg-demo-") as data_dir:
        report, _ = run_scenario_local(active_vs_sedentary(), data_dir)
    for o in report.outcomes:
        if o["verb"] == "SNAPSHOT":
            speed = o["modifiers"]["speed"]
            print(f"{o['actor']} in {o['game']:<6} PHYSICAL score {o['scores']['PHYSICAL']:.4f}  speed x{speed:.4f}")
    for actor, snap in sorted(report.final_snapshots.items()):
        print(f"{actor}: {snap['dimensions']['PHYSICAL']['effective_mpt']} mpt PHYSICAL after decay")
    print(f"oracle divergences: {len(report.divergences)}")
    return 0 if report.ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
