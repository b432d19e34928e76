"""A game keeps running when the platform does not answer.

Three runs of the same 20-frame endless runner:

* built without the SDK at all (modifier is the midpoint of the range),
* with the SDK but no linked profile (UNLINKED),
* linked to a server that accepts connections and never replies.

The first two are frame-for-frame identical. The third degrades to the same
neutral values; each SDK call gives up at its 100 ms budget, so a boost
frame (modifier read plus spend) costs at most about two budgets.

    python3 demos/offline_play.py
"""

from __future__ import annotations

import socket

from lifesync.sdk import SdkConfig, Session, connect
from lifesync.sim.game_client import SimulatedGame
from lifesync.twin import MechanicBinding

SPEED = MechanicBinding("speed", "runner", "PHYSICAL", "PASSIVE", None, 0.8, 1.2)


def main() -> int:
    baseline = SimulatedGame(None, SPEED).run(20)
    unlinked = SimulatedGame(connect(SdkConfig("http://127.0.0.1:9", "unused", None)), SPEED, "boost", boost_every=5)
    unlinked_run = unlinked.run(20)

    hole = socket.socket()
    hole.bind(("127.0.0.1", 0))
    hole.listen(64)  # never accepted, never answered
    url = f"http://127.0.0.1:{hole.getsockname()[1]}"
    with Session(SdkConfig(url, "token", "someone", snapshot_ttl_ms=0), linked=True) as s:
        stalled_run = SimulatedGame(s, SPEED, "boost", boost_every=5).run(20)
    hole.close()

    for name, run in (("no SDK", baseline), ("unlinked", unlinked_run), ("blackhole", stalled_run)):
        mods = sorted({round(f.modifier, 6) for f in run.frames})
        print(f"{name:<10} distance {run.distance:8.2f}  modifiers {mods}  worst frame in SDK {run.max_sdk_seconds * 1000:6.1f} ms")
    same = [f.speed for f in baseline.frames] == [f.speed for f in unlinked_run.frames]
    print("unlinked play identical to no-SDK play:", same)
    return 0 if same else 1


if __name__ == "__main__":
    raise SystemExit(main())
