"""Reading and writing traces as canonical JSON.

A trace file holds the scenario, the seed and controller that produced it,
the start state and one entry per step with the action and the hash of the
state it leads to.  Loading replays every step and checks the hashes, so a
file that does not describe a real computation is rejected.
"""

from __future__ import annotations

import json
from typing import IO

from .kernel import (ComputationFragment, action_from_json, action_to_json,
                     fragment_from_trace, state_hash, state_to_json)
from .model import MalformedTrace, MicroserviceSystem, Scenario

FORMAT_VERSION = 1


def trace_to_json(fragment: ComputationFragment, seed=None, algorithm=None,
                  full_states: bool = False) -> dict:
    system = fragment.system
    steps = []
    for a, s in fragment.steps:
        entry = {"action": action_to_json(a), "state_hash": state_hash(system, s)}
        if full_states:
            entry["state"] = state_to_json(system, s)
        steps.append(entry)
    return {
        "v": FORMAT_VERSION,
        "scenario": system.scenario.to_json(),
        "seed": seed,
        "algorithm": algorithm if algorithm is not None else system.scenario.algorithm,
        "start": state_to_json(system, fragment.start),
        "steps": steps,
    }


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def save_trace(fragment: ComputationFragment, fp: IO[str], **kw) -> None:
    fp.write(dumps(trace_to_json(fragment, **kw)))


def trace_from_json(data: dict) -> tuple[ComputationFragment, dict]:
    """Rebuild a fragment; returns it with the metadata (seed, algorithm)."""
    if not isinstance(data, dict) or data.get("v") != FORMAT_VERSION:
        raise MalformedTrace(f"unsupported trace format {data.get('v') if isinstance(data, dict) else data!r}")
    try:
        scenario = Scenario.from_json(data["scenario"])
        raw_steps = data["steps"]
    except KeyError as e:
        raise MalformedTrace(f"trace lacks {e.args[0]!r}") from None
    system = MicroserviceSystem(scenario)
    start = system.initial_state()
    if "start" in data and data["start"] != state_to_json(system, start):
        raise MalformedTrace("start state is not the scenario's initial state")
    actions = [action_from_json(s["action"]) for s in raw_steps]
    try:
        frag = fragment_from_trace(system, actions, start)
    except Exception as e:
        raise MalformedTrace(f"trace does not replay: {e}") from None
    for i, ((_, s), entry) in enumerate(zip(frag.steps, raw_steps)):
        h = entry.get("state_hash")
        if h is not None and h != state_hash(system, s):
            raise MalformedTrace(f"state hash mismatch at step {i}")
    meta = {"seed": data.get("seed"), "algorithm": data.get("algorithm") or scenario.algorithm}
    return frag, meta


def load_trace(fp: IO[str]) -> tuple[ComputationFragment, dict]:
    try:
        data = json.load(fp)
    except json.JSONDecodeError as e:
        raise MalformedTrace(f"not JSON: {e}") from None
    return trace_from_json(data)
