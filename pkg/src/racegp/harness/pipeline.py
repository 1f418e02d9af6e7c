"""Pipeline stages: tracks, data collection, training, racing, validation, update, report.

Every stage reads its inputs through the manifest (existence and hash
checked), writes its outputs atomically and records them with their hashes.

Seed derivation: each stochastic stage draws from
``SeedSequence([master_seed, crc32(stage_name)])`` with the stage names
``track/train``, ``track/val<i>``, ``purepursuit``, ``gp/initial`` and
``gp/updated``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import mismatch
from ..control.closed_loop import (MpcController, OffTrackError, PurePursuitController, make_plant,
                                   run_closed_loop)
from ..mismatch import CorrectedModel, MismatchDataset
from ..models import (DELTA, OMEGA, VX, VY, X, Y, DriveParams, ModelKind, NominalModel, Vehicle, step)
from ..track import RacingLine, Track, compute_racing_line, generate_random_track
from .config import ExperimentConfig, derive_int_seed, derive_seed
from .io import (ArtifactError, read_csv, read_json, read_transitions, write_csv, write_json, write_laps,
                 write_transitions)
from .manifest import Manifest

log = logging.getLogger("racegp")

SCENARIOS = {"worst": "WorstCase", "bayes": "BayesRace", "best": "BestCase"}
MODEL_TAGS = ("initial", "updated")
ZERO_SIGNAL_VARIANCE = 1e-8


class RuntimeStageError(RuntimeError):
    """A stage failed for a reason other than configuration or missing inputs."""


class Workspace:
    """Output directory plus the manifest and configuration of one experiment."""

    def __init__(self, out, cfg: ExperimentConfig):
        self.root = Path(out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        raw_sha = hashlib.sha256(json.dumps(cfg.raw, sort_keys=True).encode()).hexdigest()
        self.manifest = Manifest.open(self.root, cfg.path, raw_sha, cfg.seed)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)


# ---------------------------------------------------------------------------
# tracks


def track_names(cfg: ExperimentConfig) -> list[str]:
    return ["train"] + [f"val{i + 1}" for i in range(cfg.experiment["n_validation_tracks"])]


BENCHMARK_TRACK = "val1"


def cmd_generate_track(ws: Workspace) -> dict:
    cfg = ws.cfg
    outputs, seeds = {}, {}
    for name in track_names(cfg):
        seed = derive_int_seed(cfg.seed, f"track/{name}")
        try:
            track = generate_random_track(seed, cfg.track_gen)
        except Exception as exc:
            raise RuntimeStageError(f"track generation failed for {name} (seed {seed}): {exc}") from exc
        line = compute_racing_line(track, cfg.speed_limits)
        outputs[f"track_{name}"] = _write_text(ws.path("tracks", f"track_{name}.csv"), track.to_csv())
        outputs[f"line_{name}"] = _write_text(ws.path("tracks", f"raceline_{name}.csv"), line.to_csv())
        seeds[name] = seed
    ws.manifest.data["track_seeds"] = seeds
    ws.manifest.record("gen-track", outputs)
    return outputs


def _write_text(path, text):
    from .io import atomic_write_text
    return atomic_write_text(path, text)


def load_track(ws: Workspace, name: str) -> tuple[Track, RacingLine]:
    track = Track.load(ws.manifest.artifact("gen-track", f"track_{name}"))
    line = RacingLine.from_csv(ws.manifest.artifact("gen-track", f"line_{name}").read_text(), track)
    return track, line


# ---------------------------------------------------------------------------
# data collection


def cmd_collect(ws: Workspace, laps: int | None = None) -> dict:
    cfg = ws.cfg
    track, line = load_track(ws, "train")
    laps = laps or cfg.pp["laps"]
    rng = np.random.default_rng(derive_seed(cfg.seed, "purepursuit"))
    gains = cfg.pp_gains(rng)
    plant = make_plant(cfg.vehicle, cfg.Ts)
    ctrl = PurePursuitController(line, gains, cfg.vehicle, cfg.Ts)
    log_path = ws.path("logs", "collect.csv")
    try:
        res = run_closed_loop(plant, ctrl, track, line, laps, v0=cfg.experiment["v0"],
                              max_lap_time=cfg.experiment["max_lap_time"])
    except (OffTrackError,) as exc:
        write_transitions(log_path, exc.result.states, exc.result.inputs, cfg.Ts)
        raise RuntimeStageError(f"data collection left the track: {exc}; prefix log kept at {log_path}") from exc
    outputs = {"log": write_transitions(log_path, res.states, res.inputs, cfg.Ts),
               "laps": write_laps(ws.path("logs", "collect_laps.csv"), res)}
    ws.manifest.record("collect", outputs, ["gen-track:track_train"],
                       {"gains": {"lookahead": gains.lookahead, "speed_gain": gains.speed_gain,
                                  "speed_scale": gains.speed_scale}})
    return outputs


# ---------------------------------------------------------------------------
# training


DATASET_HEADER = list(mismatch.FEATURE_NAMES) + [f"e_{n}" for n in mismatch.ERROR_NAMES]


def write_dataset(path, data: MismatchDataset):
    return write_csv(path, DATASET_HEADER, np.hstack([data.features, data.errors]))


def read_dataset(path) -> MismatchDataset:
    header, rows = read_csv(path)
    if header != DATASET_HEADER:
        raise ValueError(f"{path}: unexpected dataset header")
    arr = np.array([[float(c) for c in r] for r in rows]).reshape(-1, 9)
    return MismatchDataset(arr[:, :6], arr[:, 6:])


def _train_outputs(ws, tag, model: CorrectedModel, used, report, full: MismatchDataset):
    model_dir = ws.path("models", tag)
    paths = model.save(model_dir, {"Ts": ws.cfg.Ts})
    rep = report.to_dict()
    warnings = []
    for g in rep["gps"]:
        if g["signal_variance"] < ZERO_SIGNAL_VARIANCE:
            msg = f"near-zero signal variance for the {g['target']} GP ({g['signal_variance']:.3g}); the data carry no mismatch"
            warnings.append(msg)
            log.warning(msg)
    rep["warnings"] = warnings
    outputs = {p.name: p for p in paths}
    outputs["report"] = write_json(model_dir / "training_report.json", rep)
    outputs["dataset"] = write_dataset(model_dir / "dataset.csv", full)
    outputs["dataset_used"] = write_dataset(model_dir / "dataset_used.csv", used)
    return outputs, rep


def cmd_train(ws: Workspace) -> dict:
    cfg = ws.cfg
    transitions = read_transitions(ws.manifest.artifact("collect", "log"), cfg.Ts)
    data = mismatch.build_mismatch_dataset(transitions, cfg.vehicle)
    model, used, report = mismatch.train_corrected_model(
        data, cfg.vehicle, cfg.Ts, cfg.gp_search, derive_int_seed(cfg.seed, "gp/initial"), n_max=cfg.gp_n_max)
    outputs, rep = _train_outputs(ws, "initial", model, used, report, data)
    ws.manifest.record("train", outputs, ["collect:log"])
    return rep


def load_corrected(ws: Workspace, tag: str) -> CorrectedModel:
    stage = "train" if tag == "initial" else "update"
    for name in ("gp_vx.gp", "gp_vy.gp", "gp_omega.gp", "corrected_model.json"):
        ws.manifest.artifact(stage, name)
    model = CorrectedModel.load(ws.path("models", tag), ws.cfg.vehicle)
    model.check_Ts(ws.cfg.Ts)
    return model


# ---------------------------------------------------------------------------
# racing


def race_tag(scenario: str, model_tag: str = "initial", slack: float | None = None) -> str:
    tag = scenario if scenario != "bayes" or model_tag == "initial" else f"bayes_{model_tag}"
    if slack is not None:
        tag += f"_slack{slack:g}"
    return tag


def scenario_model(ws: Workspace, scenario: str, model_tag: str = "initial"):
    cfg = ws.cfg
    if scenario == "worst":
        return NominalModel(ModelKind.EXTENDED_KINEMATIC, cfg.vehicle, cfg.Ts)
    if scenario == "best":
        return NominalModel(ModelKind.DYNAMIC, cfg.vehicle, cfg.Ts)
    if scenario == "bayes":
        return load_corrected(ws, model_tag)
    raise ValueError(f"unknown scenario {scenario!r}")


def replay_divergence(plant: NominalModel, solutions, states, every: int, Ts: float):
    """Open-loop replay of every ``every``-th MPC plan on the plant; RMS position gap per plan."""
    rows = []
    for k in range(0, len(solutions), every):
        sol = solutions[k]
        actual = plant.rollout(states[k], sol.inputs)
        gap = np.linalg.norm(actual[1:, [X, Y]] - sol.predicted_states[1:, [X, Y]], axis=1)
        rows.append([k * Ts, float(np.sqrt(np.mean(gap**2))), float(gap[-1])])
    return rows


def cmd_race(ws: Workspace, scenario: str, *, model_tag: str = "initial", laps: int | None = None,
             slack_override: float | None = None, track_name: str = BENCHMARK_TRACK) -> dict:
    cfg = ws.cfg
    track, line = load_track(ws, track_name)
    model = scenario_model(ws, scenario, model_tag)
    mpc_cfg = cfg.mpc if slack_override is None else cfg.mpc.with_slack(slack_override)
    laps = laps or cfg.experiment["race_laps"]
    plant = make_plant(cfg.vehicle, cfg.Ts)
    tag = race_tag(scenario, model_tag, slack_override)
    try:
        res = run_closed_loop(plant, MpcController(model, mpc_cfg, line, track), track, line, laps,
                              v0=cfg.experiment["v0"], max_lap_time=cfg.experiment["max_lap_time"],
                              keep_solutions=True)
    except OffTrackError as exc:
        write_transitions(ws.path("logs", f"race_{tag}.csv"), exc.result.states, exc.result.inputs, cfg.Ts)
        raise RuntimeStageError(f"{SCENARIOS[scenario]} left the track: {exc}") from exc
    div = replay_divergence(plant, res.solutions, res.states, cfg.experiment["replay_every"], cfg.Ts)
    statuses = [s.solve_status for s in res.solutions]
    iters = np.array([s.iterations for s in res.solutions])
    times = np.array(res.solve_times)
    summary = {
        "scenario": SCENARIOS[scenario],
        "model": model_tag if scenario == "bayes" else None,
        "track": track_name,
        "slack_penalty": mpc_cfg.S,
        "lap_times": res.lap_times,
        "divergence_rms_mean": float(np.mean([r[1] for r in div])),
        "status_counts": {s: statuses.count(s) for s in sorted(set(statuses))},
        "solver_iterations_mean": float(iters.mean()),
        "solve_time_mean_s": float(times.mean()),
        "solve_time_max_s": float(times.max()),
    }
    outputs = {
        "log": write_transitions(ws.path("logs", f"race_{tag}.csv"), res.states, res.inputs, cfg.Ts),
        "laps": write_laps(ws.path("logs", f"race_{tag}_laps.csv"), res),
        "divergence": write_csv(ws.path("logs", f"race_{tag}_divergence.csv"),
                                ["t", "rms_divergence", "final_divergence"], div),
        "summary": write_json(ws.path("logs", f"race_{tag}.json"), summary),
    }
    parents = [f"gen-track:track_{track_name}"]
    if scenario == "bayes":
        parents.append("train:gp_vx.gp" if model_tag == "initial" else "update:gp_vx.gp")
    ws.manifest.record(f"race:{tag}", outputs, parents)
    return summary


# ---------------------------------------------------------------------------
# validation


def validation_rows(model: CorrectedModel, transitions, Ts: float):
    if len(transitions) == 0:
        raise ValueError("validation log is empty")
    model.check_Ts(transitions[0].Ts)
    S = np.stack([t.s for t in transitions])
    U = np.stack([t.u for t in transitions])
    S1 = np.stack([t.s_next for t in transitions])
    nominal = model.nominal.step(S, U)
    pred, sig = model.step_with_uncertainty(S, U)
    idx = list(mismatch.ERROR_STATE_INDEX)
    e_true = (S1 - nominal)[:, idx]
    e_mu = (pred - nominal)[:, idx]
    return S, e_true, e_mu, sig


def validation_metrics(e_true, e_mu, sig, threshold: float) -> dict:
    raw_rms = np.sqrt(np.mean(e_true**2, axis=0))
    cor_rms = np.sqrt(np.mean((e_true - e_mu) ** 2, axis=0))
    covered = np.abs(e_true - e_mu) <= 1.959963984540054 * sig
    max_sig = sig.max(axis=1)
    names = mismatch.ERROR_NAMES
    return {
        "n": int(len(e_true)),
        "rms_raw": dict(zip(names, raw_rms.tolist())),
        "rms_corrected": dict(zip(names, cor_rms.tolist())),
        "rms_ratio": dict(zip(names, (cor_rms / np.where(raw_rms > 0, raw_rms, np.inf)).tolist())),
        "coverage95": dict(zip(names, covered.mean(axis=0).tolist())),
        "mean_max_sigma": float(max_sig.mean()),
        "n_high_uncertainty": int(np.sum(max_sig > threshold)),
        "sigma_threshold": threshold,
    }


def cmd_validate(ws: Workspace, *, model_tag: str = "initial", log_stage: str = "race:best") -> dict:
    cfg = ws.cfg
    model = load_corrected(ws, model_tag)
    transitions = read_transitions(ws.manifest.artifact(log_stage, "log"), cfg.Ts)
    S, e_true, e_mu, sig = validation_rows(model, transitions, cfg.Ts)
    header = ["t"]
    for n in mismatch.ERROR_NAMES:
        header += [f"e_true_{n}", f"e_mu_{n}", f"e_sigma_{n}"]
    rows = []
    for k in range(len(S)):
        row = [k * cfg.Ts]
        for c in range(3):
            row += [e_true[k, c], e_mu[k, c], sig[k, c]]
        rows.append(row)
    thr = cfg.experiment["sigma_threshold"]
    max_sig = sig.max(axis=1)
    flags = [[k * cfg.Ts, S[k, X], S[k, Y], S[k, VX], max_sig[k]] for k in np.flatnonzero(max_sig > thr)]
    metrics = validation_metrics(e_true, e_mu, sig, thr)
    metrics.update({"model": model_tag, "log": log_stage})
    name = f"{model_tag}_{log_stage.replace(':', '_')}"
    outputs = {
        "errors": write_csv(ws.path("validation", f"{name}.csv"), header, rows),
        "flags": write_csv(ws.path("validation", f"{name}_flags.csv"), ["t", "x", "y", "vx", "max_sigma"], flags),
        "sigma_track": write_csv(ws.path("validation", f"{name}_sigma.csv"), ["t", "x", "y", "max_sigma"],
                                 [[k * cfg.Ts, S[k, X], S[k, Y], max_sig[k]] for k in range(len(S))]),
        "metrics": write_json(ws.path("validation", f"{name}.json"), metrics),
    }
    ws.manifest.record(f"validate:{name}", outputs, [f"{log_stage}:log",
                                                     "train:gp_vx.gp" if model_tag == "initial" else "update:gp_vx.gp"])
    return metrics


# ---------------------------------------------------------------------------
# model update


def cmd_update(ws: Workspace, *, log_stage: str = "race:bayes") -> dict:
    cfg = ws.cfg
    old_model = load_corrected(ws, "initial")
    old = read_dataset(ws.manifest.artifact("train", "dataset"))
    new_log = read_transitions(ws.manifest.artifact(log_stage, "log"), cfg.Ts)
    if len(new_log) == 0:
        raise ValueError("update log has no transitions")
    fresh = mismatch.build_mismatch_dataset(new_log, cfg.vehicle)
    model, used, report = mismatch.update_model(
        old_model, old, new_log, cfg.gp_search, derive_int_seed(cfg.seed, "gp/updated"), n_max=cfg.gp_n_max)
    outputs, rep = _train_outputs(ws, "updated", model, used, report, old.union(fresh))
    ws.manifest.record("update", outputs, ["train:dataset", f"{log_stage}:log"])
    return rep


# ---------------------------------------------------------------------------
# report


def fig1_rollout(vehicle: Vehicle, *, accel: float = 1.0, steer: float = 0.2, duration: float = 1.0,
                 Ts: float = 0.02, substeps: int = 10):
    """Open-loop response of the three models to constant acceleration and steering.

    The drivetrain is replaced by a pure force ``m * accel`` (motor constants
    ``Cm1 = m * accel``, no resistance) and the duty cycle is held at one.
    """
    drive = DriveParams(vehicle.params.m * accel, 0.0, 0.0, 0.0)
    veh = replace(vehicle, drive=drive)
    n = int(round(duration / Ts))
    s0 = np.zeros(7)
    s0[DELTA] = steer
    u = np.array([1.0, 0.0])
    out = {}
    for kind in ModelKind:
        states = [s0]
        for _ in range(n):
            states.append(step(kind, veh, states[-1], u, Ts, substeps=substeps, integrator="rk4",
                               low_speed_fallback=True))
        out[kind] = np.asarray(states)
    return Ts * np.arange(n + 1), out


def cmd_report(ws: Workspace) -> Path:
    """Collect plot-ready data from every stage into ``report/``."""
    cfg = ws.cfg
    m = ws.manifest
    rdir = ws.path("report")
    outputs = {}

    t, roll = fig1_rollout(cfg.vehicle)
    header = ["t"] + [f"{k.value}_{c}" for k in ModelKind for c in ("x", "y")]
    rows = [[t[i]] + [roll[k][i, c] for k in ModelKind for c in (X, Y)] for i in range(len(t))]
    outputs["fig1"] = write_csv(rdir / "fig1_model_comparison.csv", header, rows)

    for name in track_names(cfg):
        for kind in ("track", "line"):
            src = m.artifact("gen-track", f"{kind}_{name}")
            outputs[f"{kind}_{name}"] = _copy(src, rdir / "tracks" / src.name)

    lap_rows, summary = [], {"config": Path(cfg.path).name, "seed": cfg.seed, "lap_times": {}}
    races = [("best", "initial"), ("bayes", "initial"), ("worst", "initial"), ("bayes", "updated")]
    for scenario, tag in races:
        rt = race_tag(scenario, tag)
        stage = f"race:{rt}"
        if scenario == "bayes" and tag == "updated" and stage not in m.data["stages"]:
            continue
        _, laps = read_csv(m.artifact(stage, "laps"))
        label = SCENARIOS[scenario] + ("" if tag == "initial" else "-updated")
        for r in laps:
            lap_rows.append([label] + r)
        summary["lap_times"][label] = [float(r[1]) for r in laps]
        for key in ("divergence", "log"):
            src = m.artifact(stage, key)
            outputs[f"{rt}_{key}"] = _copy(src, rdir / "races" / src.name)
    outputs["lap_times"] = write_csv(rdir / "lap_times.csv",
                                     ["scenario", "lap", "time_s", "mean_slack", "max_boundary_violation"],
                                     lap_rows)
    lt = summary["lap_times"]
    summary["improvement_s"] = lt["WorstCase"][0] - lt["BayesRace"][0]

    summary["validation"] = {}
    for stage in sorted(s for s in m.data["stages"] if s.startswith("validate:")):
        for key in ("errors", "flags", "sigma_track"):
            src = m.artifact(stage, key)
            outputs[f"{stage}_{key}"] = _copy(src, rdir / "validation" / src.name)
        summary["validation"][stage.split(":", 1)[1]] = read_json(m.artifact(stage, "metrics"))
    summary["training"] = {"initial": read_json(m.artifact("train", "report"))}
    if "update" in m.data["stages"]:
        summary["training"]["updated"] = read_json(m.artifact("update", "report"))
    outputs["summary"] = write_json(rdir / "summary.json", summary)
    m.record("report", outputs, sorted(s for s in m.data["stages"] if s != "report"))
    return rdir


def _copy(src: Path, dst: Path) -> Path:
    from .io import atomic_write_text
    return atomic_write_text(dst, src.read_text())


# ---------------------------------------------------------------------------


def run_all(ws: Workspace, *, with_update: bool = True) -> Path:
    """Full experiment: tracks, data, model, three scenarios, validation, update, report."""
    cmd_generate_track(ws)
    cmd_collect(ws)
    cmd_train(ws)
    cmd_race(ws, "best")
    cmd_validate(ws, model_tag="initial")
    cmd_race(ws, "worst")
    cmd_race(ws, "bayes", laps=ws.cfg.experiment["update_laps"])
    if with_update:
        cmd_update(ws)
        cmd_validate(ws, model_tag="updated")
        cmd_race(ws, "bayes", model_tag="updated")
    return cmd_report(ws)
