"""On-disk layout for posterior draws and chain checkpoints.

A store is a directory holding one ``.npy`` file per array and a
``layout.json`` describing them. Both are byte-stable for equal contents,
which is what makes serial and parallel runs comparable file by file.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import McmcConfig, ModelSpec, ParameterSet, PriorSpec

FORMAT_VERSION = 1
CHECKPOINT_VERSION = 1


def spec_to_dict(spec: ModelSpec) -> dict:
    d = asdict(spec)
    for key in ("variables", "climate", "extras"):
        d[key] = list(d[key])
    return d


def spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    d["priors"] = PriorSpec(**d["priors"])
    d["mcmc"] = McmcConfig(**d["mcmc"])
    for key in ("variables", "climate", "extras"):
        d[key] = tuple(d[key])
    return ModelSpec(**d)


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _write_arrays(directory: Path, arrays: dict[str, np.ndarray], extra: dict):
    directory.mkdir(parents=True, exist_ok=True)
    layout = {"format_version": FORMAT_VERSION, "arrays": {}}
    layout.update(extra)
    for name, arr in sorted(arrays.items()):
        arr = np.ascontiguousarray(arr)
        np.save(directory / f"{name}.npy", arr, allow_pickle=False)
        layout["arrays"][name] = {"shape": list(arr.shape), "dtype": str(arr.dtype)}
    _dump_json(layout, directory / "layout.json")


def _read_arrays(directory: Path) -> tuple[dict[str, np.ndarray], dict]:
    layout = json.loads((directory / "layout.json").read_text())
    arrays = {name: np.load(directory / f"{name}.npy", allow_pickle=False) for name in layout["arrays"]}
    return arrays, layout


# --------------------------------------------------------------------- draws


def save_draws(draws, path, extra_meta: dict | None = None):
    from .gibbs import PosteriorDraws

    path = Path(path)
    arrays = {b: getattr(draws, b) for b in PosteriorDraws.BLOCKS}
    arrays["iterations"] = draws.iterations
    for i, s in enumerate(draws.state_mean):
        arrays[f"state_mean_{i:04d}"] = s
    if draws.states is not None:
        for i, s in enumerate(draws.states):
            arrays[f"states_{i:04d}"] = s
    for k, v in draws.traces.items():
        arrays[f"trace_{k}"] = v
    meta = {
        "kind": "posterior_draws",
        "spec": spec_to_dict(draws.spec),
        "counters": draws.counters,
        "meta": draws.meta,
        "n_countries": len(draws.state_mean),
        "has_states": draws.states is not None,
    }
    if extra_meta:
        meta.update(extra_meta)
    _write_arrays(path, arrays, meta)


def load_draws(path):
    from .gibbs import PosteriorDraws

    arrays, layout = _read_arrays(Path(path))
    if layout.get("kind") != "posterior_draws":
        raise ValueError(f"{path} does not hold posterior draws")
    M = layout["n_countries"]
    states = [arrays[f"states_{i:04d}"] for i in range(M)] if layout["has_states"] else None
    traces = {k[len("trace_"):]: v for k, v in arrays.items() if k.startswith("trace_")}
    return PosteriorDraws(
        spec=spec_from_dict(layout["spec"]),
        states=states,
        state_mean=[arrays[f"state_mean_{i:04d}"] for i in range(M)],
        iterations=arrays["iterations"],
        counters=layout["counters"],
        traces=traces,
        meta=layout["meta"],
        **{b: arrays[b] for b in PosteriorDraws.BLOCKS},
    )


def _param_arrays(p: ParameterSet, prefix: str) -> dict[str, np.ndarray]:
    out = {
        f"{prefix}c": p.mean.c, f"{prefix}tau": p.mean.tau, f"{prefix}beta": p.mean.beta,
        f"{prefix}gamma": p.mean.gamma, f"{prefix}extra": p.mean.extra, f"{prefix}A": p.impact.A,
        f"{prefix}alpha": p.vol.alpha, f"{prefix}theta": p.vol.theta, f"{prefix}Q": p.vol.Q,
    }
    if p.states is not None:
        for i, h in enumerate(p.states.h):
            out[f"{prefix}h_{i:04d}"] = h
    return out


def _param_from_arrays(arrays: dict, prefix: str, M: int) -> ParameterSet:
    from .model import ImpactMatrix, MeanCoefficients, VolatilityParams, VolatilityStates

    g = lambda k: arrays[prefix + k]  # noqa: E731
    states = None
    if f"{prefix}h_0000" in arrays:
        states = VolatilityStates(tuple(arrays[f"{prefix}h_{i:04d}"] for i in range(M)))
    return ParameterSet(
        MeanCoefficients(g("c"), g("tau"), g("beta"), g("gamma"), g("extra")),
        ImpactMatrix(g("A")),
        VolatilityParams(g("alpha"), g("theta"), g("Q")),
        states,
    )


def save_parameters(p: ParameterSet, path):
    _write_arrays(Path(path), _param_arrays(p, ""), {"kind": "parameter_set", "n_countries": p.vol.alpha.shape[0]})


def load_parameters(path) -> ParameterSet:
    arrays, layout = _read_arrays(Path(path))
    return _param_from_arrays(arrays, "", layout["n_countries"])


# ---------------------------------------------------------------- checkpoints


def has_checkpoint(directory) -> bool:
    return (Path(directory) / "checkpoint" / "layout.json").exists()


def save_checkpoint(directory, iteration: int, current: ParameterSet, acc, counters, traces, spec: ModelSpec):
    """Atomically replace ``directory/checkpoint``."""
    from .gibbs import PosteriorDraws

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = _param_arrays(current, "cur_")
    n = len(acc.iterations)
    if n:
        for b in PosteriorDraws.BLOCKS:
            arrays[f"acc_{b}"] = np.stack(acc.blocks[b])
        if acc.store_states:
            for i, s in enumerate(acc.states):
                arrays[f"acc_states_{i:04d}"] = np.stack(s)
    for i, s in enumerate(acc.state_sum):
        arrays[f"acc_state_sum_{i:04d}"] = s
    arrays["acc_iterations"] = np.array(acc.iterations, dtype=int)
    for k, v in traces.items():
        arrays[f"trace_{k}"] = v
    meta = {
        "kind": "checkpoint",
        "checkpoint_version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "counters": counters,
        "spec": spec_to_dict(spec),
        "n_countries": len(acc.state_sum),
        "n_retained": n,
    }
    tmp = Path(tempfile.mkdtemp(prefix=".checkpoint-", dir=directory))
    _write_arrays(tmp, arrays, meta)
    final = directory / "checkpoint"
    old = directory / ".checkpoint-old"
    if old.exists():
        shutil.rmtree(old)
    if final.exists():
        os.replace(final, old)
    os.replace(tmp, final)
    if old.exists():
        shutil.rmtree(old)


def _schedule_free(spec: ModelSpec) -> ModelSpec:
    # worker layout and checkpoint cadence do not change the draws
    return spec.with_mcmc(workers=1, parallel_countries=False, checkpoint_every=0)


def load_checkpoint(directory, spec: ModelSpec, design) -> dict:
    from .gibbs import PosteriorDraws, _Accumulator

    arrays, layout = _read_arrays(Path(directory) / "checkpoint")
    if layout.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ValueError("unsupported checkpoint version")
    saved = _schedule_free(spec_from_dict(layout["spec"]))
    if saved != _schedule_free(spec):
        raise ValueError("checkpoint was written for a different model/MCMC configuration")
    M = layout["n_countries"]
    acc = _Accumulator(spec, design, spec.mcmc.store_states)
    n = layout["n_retained"]
    for b in PosteriorDraws.BLOCKS:
        acc.blocks[b] = list(arrays[f"acc_{b}"]) if n else []
    if acc.store_states:
        acc.states = [list(arrays[f"acc_states_{i:04d}"]) if n else [] for i in range(M)]
    acc.state_sum = [arrays[f"acc_state_sum_{i:04d}"].copy() for i in range(M)]
    acc.iterations = [int(x) for x in arrays["acc_iterations"]]
    traces = {k[len("trace_"):]: v.copy() for k, v in arrays.items() if k.startswith("trace_")}
    return {
        "iteration": layout["iteration"],
        "current": _param_from_arrays(arrays, "cur_", M),
        "counters": layout["counters"],
        "traces": traces,
        "accumulator": acc,
    }
