"""Smoke test for the pyseqlab extension.

Build it with

    cargo build --release -p seqlab-py --features extension-module
    cp target/release/libpyseqlab.so python/pyseqlab.so

(on macOS the library is libpyseqlab.dylib) and run this script from the
repository root.
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pyseqlab as sl


def main():
    tasks = sl.generate_tasks("mdp", 4, seed=1, horizon=6)
    assert [t.task_id for t in tasks] == ["task-0000", "task-0001", "task-0002", "task-0003"]
    t = tasks[0]
    assert (t.kind, t.num_states, t.num_actions, t.horizon) == ("mdp", 10, 3, 6)
    assert sl.Task.from_json(t.to_json()).to_json() == t.to_json()

    oracles = [sl.solve(t) for t in tasks]
    assert all(o.exact for o in oracles)
    print("initial values:", [round(o.initial_value, 4) for o in oracles])

    out = sl.rollout(t, oracles[0], seed=3)
    assert len(out["steps"]) == 6
    text = sl.encode(out["steps"])
    assert sl.encode(sl.decode(text)) == text
    again = sl.rollout(t, oracles[0], seed=3)
    assert again["steps"] == out["steps"]

    report = sl.optimality_gap(oracles, "oracle", seed=0, rollouts_per_task=20)
    assert report["mean_gap"] == 0.0
    random = sl.optimality_gap(oracles, "random", seed=0, rollouts_per_task=20)
    print("random policy gap: %.3f" % random["mean_gap"])
    assert random["mean_gap"] > 0.0

    calls = []

    def always_work(decision):
        calls.append(decision["t"])
        return 1

    custom = sl.optimality_gap(oracles, always_work, seed=0, rollouts_per_task=5)
    assert custom["policy"] == "custom" and len(calls) == 4 * 5 * 6

    pomdp = sl.generate_tasks("pomdp", 1, seed=2, horizon=4)[0]
    po = sl.solve(pomdp)
    beliefs = []
    sl.rollout(pomdp, lambda d: beliefs.append(d["belief"]) or 0, seed=0)
    assert all(abs(sum(b) - 1.0) < 1e-9 for b in beliefs)
    assert sl.optimality_gap([po], "qmdp", rollouts_per_task=10)["n_eval"] == 1

    dark = sl.darkroom_eval("oracle", goals=[(3, 4)], rollouts_per_goal=1)
    assert dark["mean_reward"] == 93.0

    bound = sl.q_error_bound(10, 1.0, 100.0, 1000.0)
    eps, se = sl.empirical_q_error(10, 1.0, 100, 1000.0, tasks=200, queries=20)
    assert eps <= bound + 3 * se
    assert sl.empirical_c_on(3, 1.0, 20, 100.0, num_actions=1, tasks=20) == 1.0
    assert math.isclose(sl.gap_bound(10, 1.0, 1.0, 0.25), 10.0)
    rows = sl.theory_sim({"dim": 3, "ms": [10, 50], "ns": [100.0], "kappas": [1.0], "tasks": 50})
    assert len(rows) == 2 and not any(r["violated"] for r in rows)

    try:
        sl.generate_tasks("mdp", 1, p_low=0.9, p_high=0.1)
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("bad range accepted")

    print("ok")


if __name__ == "__main__":
    main()
