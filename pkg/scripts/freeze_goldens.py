#!/usr/bin/env python3
"""Freeze golden values for the derived alignment examples.

Runs the explicit-loop oracles in tests/oracles.py on seeded random inputs
and writes JSON records {inputs, expected, oracle_id, precision} under
tests/golden/. Run once; the files are committed and never regenerated
silently.
"""

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

import oracles  # noqa: E402

OUT = Path(__file__).resolve().parent.parent / "tests" / "golden"


def instance(rng, d, m, n, t, k):
    words = rng.normal(size=(m, d)).round(6)
    landmarks = rng.normal(size=(n, d)).round(6)
    steps = rng.normal(size=(t, d)).round(6)
    views = [rng.normal(size=(k, d)).round(6) for _ in range(t)]
    return {
        "text_global": rng.normal(size=d).round(6).tolist(),
        "words": words.tolist(),
        "word_mask": [True] * m,
        "landmarks": landmarks.tolist(),
        "landmark_mask": [True] * n,
        "steps": steps.tolist(),
        "step_mask": [True] * t,
        "traj_global": steps.mean(axis=0).tolist(),
        "views": [v.tolist() for v in views],
    }


def write(name, record):
    OUT.mkdir(parents=True, exist_ok=True)
    path = OUT / f"{name}.json"
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    print(f"{name}: expected={record['expected']}")


def main():
    rng = np.random.default_rng(20240901)

    inst = instance(rng, d=2, m=2, n=2, t=2, k=3)
    write("ih_sim", {
        "oracle_id": "ih_sim_explicit_loop_v1",
        "precision": 1e-10,
        "inputs": {"text": inst, "hist": inst},
        "expected": oracles.ih_sim_ref(inst, inst),
    })

    lo_inst = instance(rng, d=3, m=2, n=2, t=1, k=3)
    write("lo_sim", {
        "oracle_id": "lo_sim_explicit_loop_v1",
        "precision": 1e-10,
        "inputs": {"instance": lo_inst, "step": 0},
        "expected": oracles.lo_sim_ref(lo_inst["landmarks"], lo_inst["landmark_mask"],
                                       lo_inst["views"][0]),
    })

    batch3 = [instance(rng, d=3, m=int(mm), n=2, t=int(tt), k=2)
              for mm, tt in [(2, 2), (3, 1), (2, 3)]]
    write("ih_level_b3", {
        "oracle_id": "ih_level_explicit_loop_v1",
        "precision": 1e-10,
        "inputs": {"batch": batch3, "tau": 1.0},
        "expected": oracles.ih_level_ref(batch3, tau=1.0),
    })

    ragged = [instance(rng, d=3, m=2, n=2, t=2, k=2),
              instance(rng, d=3, m=2, n=3, t=1, k=2)]
    write("lo_level_ragged", {
        "oracle_id": "lo_level_explicit_loop_v1",
        "precision": 1e-10,
        "inputs": {"batch": ragged, "tau": 1.0},
        "expected": oracles.lo_level_ref(ragged, tau=1.0),
    })

    pair = [instance(rng, d=3, m=3, n=2, t=2, k=2),
            instance(rng, d=3, m=2, n=2, t=3, k=2)]
    write("single_level_b2", {
        "oracle_id": "single_level_explicit_loop_v1",
        "precision": 1e-10,
        "inputs": {"batch": pair, "tau": 1.0},
        "expected": oracles.single_level_ref(pair, tau=1.0),
    })

    bank_batch = [instance(rng, d=3, m=2, n=2, t=2, k=2) for _ in range(2)]
    bank_entries = [instance(rng, d=3, m=3, n=2, t=1, k=2) for _ in range(3)]
    write("ih_level_with_bank", {
        "oracle_id": "ih_level_explicit_loop_v1",
        "precision": 1e-10,
        "inputs": {"batch": bank_batch, "bank": bank_entries, "tau": 1.0},
        "expected": oracles.ih_level_ref(bank_batch, bank_entries, tau=1.0),
    })

    # Closed-form literals double-checked in high precision.
    import mpmath
    mpmath.mp.dps = 40
    e = mpmath.e
    reduce_gold = float(e / (1 + e))
    assert abs(oracles.reduce_ref([[0.0, 1.0], [1.0, 0.0]]) - reduce_gold) < 1e-15
    contrast_gold = float(2 * mpmath.log(1 + mpmath.exp(-1)))
    s = [[1.0, 0.0], [0.0, 1.0]]
    assert abs(oracles.contrastive_ref(s, 1.0) * 2 - contrast_gold) < 1e-15
    print(f"reduce golden  = {reduce_gold!r}")
    print(f"contrast golden = {contrast_gold!r}")


if __name__ == "__main__":
    main()
