"""``chunkcast`` command line: datagen, train-teacher, distill, stream, bench, ablate.

Configuration is one JSON document with sections ``data``, ``model``,
``schedule``, ``distill`` and ``pipeline``; ``--set section.key=value``
overrides single fields. Unknown keys are rejected. Every command writes its
resolved configuration next to its outputs.

Exit codes: 0 success, 2 configuration error, 3 numeric abort,
4 invariant violation.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from chunkcast.chunking import ChunkLayout
from chunkcast.distill import DistillConfig
from chunkcast.errors import (ChunkcastError, ConditioningError, ConfigError, ContractError, DimensionError,
                              InvariantViolation, NumericError)
from chunkcast.model import DiT, Mode, ModelConfig
from chunkcast.numerics import ParamSet
from chunkcast.numerics.serialize import load_params, save_params, save_tensor
from chunkcast.pipeline import (CASE_NUMBER, Case, CostModel, ModeController, StreamSession, Topology, bench_rows,
                                parse_mode_script, realtime_check, run_stream, simulate_topology, write_bench)
from chunkcast.synthdata import PseudoVAE, PuppetSpec, load_dataset, sync_score, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4


def default_config() -> dict:
    spec = PuppetSpec()
    from chunkcast.experiments import puppet_model_config

    distill = {k: v for k, v in DistillConfig().__dict__.items() if k != "seed"}
    distill["sigmas"] = list(distill["sigmas"])
    distill.update({"frames_per_chunk": 3, "chunks_per_window": 7, "ablate_steps": 600, "ablate_eval_size": 32})
    return {
        "seed": 0,
        "workdir": "run",
        "data": {"n_clips": 500, "val_fraction": 0.1, "spec": spec.to_dict()},
        "model": puppet_model_config(spec).to_dict(),
        "schedule": {"steps": 5000, "batch": 4, "lr": 1e-3, "t_mu": 0.0, "t_sigma": 1.0, "ref_choices": [3, 7],
                     "ref_weights": [0.75, 0.25], "freeze_non_audio": False},
        "distill": distill,
        "pipeline": {"topology": Case.DISAGG_1PLUS1.value, "n_chunks": 100, "fps": 25.0, "frames_per_chunk": 3,
                     "cost": CostModel().to_dict(), "queue_depth": 2, "transport": "queue", "mode_script": "",
                     "checkpoint": "student", "quantile": 0.95},
        "log_every": 10,
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = _coerce(base[key], value, where)
    return out


def _coerce(default, value, where: str):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} expects a boolean, got {value!r}")
        return value
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} expects a number, got {value!r}")
        if isinstance(default, int) and not isinstance(value, int):
            if float(value).is_integer():
                return int(value)
            raise ConfigError(f"{where} expects an integer, got {value!r}")
        return float(value) if isinstance(default, float) else value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where} expects a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{where} expects a list, got {value!r}")
    return value


def parse_override(text: str) -> dict:
    """``a.b=value`` -> nested dict; the value is parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"--set expects path=value, got {text!r}")
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    root = node
    keys = path.strip().split(".")
    for k in keys[:-1]:
        node[k] = {}
        node = node[k]
    node[keys[-1]] = value
    return root


def resolve_config(config_path: str | None, overrides: list[str]) -> dict:
    cfg = default_config()
    if config_path:
        try:
            user = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        cfg = _merge(cfg, user)
    for text in overrides:
        cfg = _merge(cfg, parse_override(text))
    # validate sections by constructing their typed views
    PuppetSpec.from_dict(cfg["data"]["spec"])
    ModelConfig.from_dict(cfg["model"])
    _distill_config(cfg)
    CostModel(**cfg["pipeline"]["cost"])
    Case.parse(cfg["pipeline"]["topology"])
    return cfg


def _distill_config(cfg: dict) -> DistillConfig:
    d = {k: v for k, v in cfg["distill"].items() if k in DistillConfig.__dataclass_fields__}
    d["seed"] = cfg["seed"]
    return DistillConfig(**d)


def _workdir(cfg: dict) -> Path:
    p = Path(cfg["workdir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_resolved(cfg: dict, command: str) -> None:
    (_workdir(cfg) / f"{command}.config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))


# ---- checkpoints ------------------------------------------------------------

def save_checkpoint(stem, model: DiT, extra: dict | None = None) -> None:
    """Params in the binary param-set format plus a JSON sidecar with the model config."""
    stem = Path(stem)
    params_path = stem.with_suffix(".csps")
    save_params(params_path, model.params.state())
    meta = {"model": model.config.to_dict(), "params_sha256": hashlib.sha256(params_path.read_bytes()).hexdigest()}
    meta.update(extra or {})
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_checkpoint(stem) -> DiT:
    stem = Path(stem)
    try:
        meta = json.loads(stem.with_suffix(".json").read_text())
        state = load_params(stem.with_suffix(".csps"))
    except OSError as exc:
        raise ConfigError(f"cannot load checkpoint {stem}: {exc}") from exc
    return DiT(ModelConfig.from_dict(meta["model"]), ParamSet(state))


# ---- commands ---------------------------------------------------------------

def _spec(cfg) -> PuppetSpec:
    return PuppetSpec.from_dict(cfg["data"]["spec"])


def _data_dir(cfg) -> Path:
    return _workdir(cfg) / "data"


def _latent_data(cfg, split: str):
    from chunkcast.experiments import LatentData

    spec = _spec(cfg)
    clips = load_dataset(_data_dir(cfg), split)
    if not clips:
        raise ConfigError(f"dataset split {split!r} is empty")
    return LatentData.from_clips(clips, PseudoVAE(spec, seed=cfg["seed"]))


def cmd_datagen(cfg: dict, force: bool = False) -> dict:
    spec = _spec(cfg)
    manifest = write_dataset(_data_dir(cfg), spec, cfg["data"]["n_clips"], cfg["seed"], force=force,
                             val_fraction=cfg["data"]["val_fraction"])
    scores = []
    for clip in load_dataset(_data_dir(cfg)):
        if int((clip.modes == Mode.SPEAKING).sum()) >= 8:
            scores.append(sync_score(clip.frames, clip.amplitude, clip.modes, spec))
    _write_resolved(cfg, "datagen")
    return {
        "clips": cfg["data"]["n_clips"],
        "manifest": str(manifest),
        "manifest_sha256": hashlib.sha256(manifest.read_bytes()).hexdigest(),
        "min_sync": min(scores) if scores else None,
    }


def cmd_train_teacher(cfg: dict) -> dict:
    from chunkcast.experiments import JsonlLogger, train_teacher

    sc = cfg["schedule"]
    data = _latent_data(cfg, "train")
    model = DiT(ModelConfig.from_dict(cfg["model"]))
    log = JsonlLogger(_workdir(cfg) / "train-teacher.metrics.jsonl", cfg["log_every"])
    if len(sc["ref_weights"]) != len(sc["ref_choices"]):
        raise ConfigError("schedule.ref_weights must match schedule.ref_choices")
    keep = [(r, w) for r, w in zip(sc["ref_choices"], sc["ref_weights"]) if r < data.latents.shape[1]]
    if not keep:
        raise ConfigError("no reference length shorter than the clips")
    refs = [r for r, _ in keep]
    weights = np.array([w for _, w in keep], dtype=float)
    weights /= weights.sum()
    try:
        losses = train_teacher(model, data, sc["steps"], sc["batch"], sc["lr"], cfg["seed"], tuple(refs),
                               tuple(weights), sc["freeze_non_audio"], t_mu=sc["t_mu"],
                               t_sigma=sc["t_sigma"], log=log)
    finally:
        log.close()
    save_checkpoint(_workdir(cfg) / "teacher", model, {"seed": cfg["seed"], "steps": sc["steps"]})
    _write_resolved(cfg, "train-teacher")
    head = float(np.mean(losses[: max(1, len(losses) // 20)])) if losses else None
    tail = float(np.mean(losses[-max(1, len(losses) // 20):])) if losses else None
    return {"steps": sc["steps"], "initial_loss": head, "final_loss": tail}


def _layout(cfg: dict) -> ChunkLayout:
    d = cfg["distill"]
    return ChunkLayout(d["frames_per_chunk"], d["chunks_per_window"], cfg["model"]["frame_tokens"])


def cmd_distill(cfg: dict) -> dict:
    from chunkcast.experiments import JsonlLogger, run_distill

    teacher = load_checkpoint(_workdir(cfg) / "teacher")
    data = _latent_data(cfg, "train")
    log = JsonlLogger(_workdir(cfg) / "distill.metrics.jsonl", cfg["log_every"])
    dcfg = _distill_config(cfg)
    try:
        state = run_distill(teacher, data, dcfg, _layout(cfg), log=log)
    finally:
        log.close()
    save_checkpoint(_workdir(cfg) / "student", state.student, {"sigmas": list(dcfg.sigmas)})
    save_checkpoint(_workdir(cfg) / "fake_score", state.fake_score)
    _write_resolved(cfg, "distill")
    return {"steps": state.step, "warmup_steps": state.mix.warmup_steps}


def _stream_model(cfg: dict) -> DiT:
    ck = cfg["pipeline"]["checkpoint"]
    if ck is None or ck == "":
        return DiT(ModelConfig.from_dict(cfg["model"]))
    path = Path(ck)
    if not path.is_absolute() and not path.with_suffix(".json").exists():
        path = _workdir(cfg) / ck
    return load_checkpoint(path)


def _session(cfg: dict, model: DiT, n_chunks: int, script=None) -> StreamSession:
    from chunkcast.experiments import stream_track

    p = cfg["pipeline"]
    spec = _spec(cfg)
    layout = ChunkLayout(p["frames_per_chunk"], cfg["distill"]["chunks_per_window"], cfg["model"]["frame_tokens"])
    clip = stream_track(spec, n_chunks, layout.frames_per_chunk, cfg["seed"], None)
    vae = PseudoVAE(spec, seed=cfg["seed"])
    controller = ModeController(Mode.SPEAKING)
    for chunk, mode in script or []:
        controller.switch(chunk, mode)
    sigmas = tuple(cfg["distill"]["sigmas"])
    return StreamSession(model, vae.encode(clip.frames[: layout.frames_per_chunk]), clip.audio, layout, sigmas, vae,
                         seed=cfg["seed"], controller=controller)


def _topology(cfg: dict, case=None) -> Topology:
    p = cfg["pipeline"]
    return Topology(Case.parse(case or p["topology"]), CostModel(**p["cost"]), p["queue_depth"])


def cmd_stream(cfg: dict) -> dict:
    p = cfg["pipeline"]
    script = parse_mode_script(p["mode_script"]) if p["mode_script"] else []
    n = p["n_chunks"]
    session = _session(cfg, _stream_model(cfg), n, script)
    top = _topology(cfg)
    frames: list = []
    report = run_stream(top, session, n, frames, transport=p["transport"])
    report.realtime = realtime_check(report, p["fps"], p["frames_per_chunk"], p["quantile"])
    predicted = simulate_topology(top, n)
    wd = _workdir(cfg)
    report.write_json(wd / "stream.report.json")
    report.write_csv(wd / "stream.chunks.csv")
    if frames:
        save_tensor(wd / "stream.frames.cstn", np.concatenate([f for _, f in frames]))
        modes = [int(session.controller.mode_for(c)) for c, _ in frames]
        (wd / "stream.frames.json").write_text(json.dumps({"chunk_modes": modes, "seed": cfg["seed"],
                                                           "spec": _spec(cfg).to_dict()}))
    _write_resolved(cfg, "stream")
    if report.aborted:
        raise InvariantViolation(f"stream aborted: {report.aborted}")
    return {
        "case": top.case.value,
        "summary": report.summary(),
        "realtime": report.realtime,
        "predicted_realtime": realtime_check(predicted, p["fps"], p["frames_per_chunk"], p["quantile"]),
        "predicted_mean_ms": predicted.summary()["mean_ms"],
        "cache": report.cache_stats,
    }


def cmd_bench(cfg: dict) -> dict:
    p = cfg["pipeline"]
    n = p["n_chunks"]
    model = _stream_model(cfg)
    reports, predicted = [], []
    for case in Case:
        top = _topology(cfg, case)
        reports.append(run_stream(top, _session(cfg, model, n), n, transport=p["transport"]))
        predicted.append(simulate_topology(top, n))
    rows = bench_rows(reports, p["fps"], p["frames_per_chunk"])
    for row, pred in zip(rows, bench_rows(predicted, p["fps"], p["frames_per_chunk"])):
        row["predicted_mean_ms"] = pred["mean_ms"]
        row["case_number"] = CASE_NUMBER[Case.parse(row["case"])]
    wd = _workdir(cfg)
    write_bench(rows, wd / "bench.json", wd / "bench.csv")
    _write_resolved(cfg, "bench")
    m = {r["case_number"]: r["mean_ms"] for r in rows}
    return {"rows": rows, "orderings": {"case3<case2": m[3] < m[2], "case4<case2": m[4] < m[2],
                                        "case3<case1": m[3] < m[1]}}


def cmd_ablate(cfg: dict) -> dict:
    from chunkcast.experiments import run_ablation

    teacher = load_checkpoint(_workdir(cfg) / "teacher")
    spec = _spec(cfg)
    dcfg = _distill_config(cfg)
    dcfg = DistillConfig(**{**dcfg.__dict__, "steps": cfg["distill"]["ablate_steps"]})
    rows = run_ablation(teacher, _latent_data(cfg, "train"), _latent_data(cfg, "val"), dcfg, spec,
                        PseudoVAE(spec, seed=cfg["seed"]), eval_size=cfg["distill"]["ablate_eval_size"],
                        score_cost=cfg["pipeline"]["cost"]["score_ms_per_step"])
    (_workdir(cfg) / "ablate.json").write_text(json.dumps(rows, indent=1))
    _write_resolved(cfg, "ablate")
    return {"cells": rows}


COMMANDS = {
    "datagen": cmd_datagen,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "stream": cmd_stream,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunkcast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE", help="override one field")
        p.add_argument("--workdir", help="shorthand for --set workdir=DIR")
        if name == "datagen":
            p.add_argument("--force", action="store_true", help="overwrite a non-empty dataset directory")
        if name == "stream":
            p.add_argument("--mode-script", help='e.g. "0:speak,40:silence,80:speak"')
            p.add_argument("--topology", choices=[c.value for c in Case])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.workdir:
        overrides.append(f"workdir={json.dumps(args.workdir)}")
    if getattr(args, "mode_script", None):
        overrides.append(f"pipeline.mode_script={json.dumps(args.mode_script)}")
    if getattr(args, "topology", None):
        overrides.append(f"pipeline.topology={json.dumps(args.topology)}")
    try:
        cfg = resolve_config(args.config, overrides)
        if args.command == "datagen":
            result = cmd_datagen(cfg, force=args.force)
        else:
            result = COMMANDS[args.command](cfg)
    except (ConfigError, ConditioningError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvariantViolation, ContractError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ChunkcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=1, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
