"""Method-agnostic persistence of fitted particle sets.

SMC² and IS results share one JSON layout, tagged with the method, so the
predictive and evaluation code can load either without knowing which
sampler produced it.  Floats are written with ``repr`` precision, so a
round trip is exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .gating_prior import GatingParams
from .is_baseline import ISParticle, ISResult
from .smc2_engine import PosteriorSample, particle_from_dict, particle_to_dict

FORMAT = "smc2moe-particles/1"


def result_to_dict(res) -> dict:
    if res.method == "smc2":
        parts = [particle_to_dict(p) for p in res.particles]
        extra = {"kappas": list(map(float, res.kappas))}
    elif res.method == "is":
        parts = [{
            "labels": p.labels.tolist(),
            "log_weights": p.psi.log_weights.tolist(),
            "means": p.psi.means.tolist(),
            "sds": p.psi.sds.tolist(),
            "theta": p.thetas.tolist(),
            "log_weight": p.log_weight,
        } for p in res.particles]
        extra = {}
    else:
        raise ValueError(f"unknown method {res.method!r}")
    return {"format": FORMAT, "method": res.method, "log_weights": np.asarray(res.log_weights).tolist(),
            "particles": parts, **extra}


def result_from_dict(d: dict):
    if d.get("format") != FORMAT:
        raise ValueError("not a particle file")
    lw = np.array(d["log_weights"], dtype=float)
    if d["method"] == "smc2":
        parts = [particle_from_dict(p) for p in d["particles"]]
        return PosteriorSample(parts, lw, d["kappas"], {})
    if d["method"] == "is":
        parts = [ISParticle(np.array(p["labels"], dtype=np.int64),
                            GatingParams(np.array(p["log_weights"]), np.array(p["means"]), np.array(p["sds"])),
                            np.array(p["theta"], dtype=float), float(p["log_weight"]))
                 for p in d["particles"]]
        return ISResult(parts, lw, {})
    raise ValueError(f"unknown method {d['method']!r}")


def save_result(res, path):
    Path(path).write_text(json.dumps(result_to_dict(res)) + "\n")


def load_result(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"particle file {path} does not exist")
    return result_from_dict(json.loads(path.read_text()))
