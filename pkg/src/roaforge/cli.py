"""``roaforge`` command line: train, eval, verify, baseline, export-smt2."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np
import torch

from . import verify as verify_mod
from .dynamics import SYSTEM_NAMES, SystemSpec, make_system, rk4_rollout
from .lqr import lqr_for, lqr_roa_estimate
from .lyapnet import ControllerNet, LyapunovNet, ResidualDynamics, bundle, unbundle
from .netcore import ParamStore
from .roa import build_mesh, level_search, sample_level_boundary, value_fn_for
from .trainer import TrainConfig, TrainingAborted, classify_mesh, initialise, train, write_metrics

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FOUND, EXIT_ERROR, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("roaforge")

_TOP_KEYS = {"schema_version", "system", "system_params", "train", "out", "seed",
             "perturbation", "eval"}
_EVAL_KEYS = {"boundary_samples", "horizon", "tolerance", "seed"}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)} - {"system"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    system: str
    system_params: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    out: str = "runs/default"
    seed: int = 0
    perturbation: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
        if raw.get("system") not in SYSTEM_NAMES:
            raise ConfigError(f"system must be one of {list(SYSTEM_NAMES)}")
        for key in ("system_params", "train", "perturbation", "eval"):
            if not isinstance(raw.get(key, {}), dict):
                raise ConfigError(f"{key} must be an object")
        bad = set(raw.get("train", {})) - _TRAIN_FIELDS
        if bad:
            raise ConfigError(f"unknown train keys: {sorted(bad)}")
        bad = set(raw.get("eval", {})) - _EVAL_KEYS
        if bad:
            raise ConfigError(f"unknown eval keys: {sorted(bad)}")
        seed = raw.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        cfg = cls(system=raw["system"], system_params=dict(raw.get("system_params", {})),
                  train=dict(raw.get("train", {})), out=str(raw.get("out", "runs/default")),
                  seed=seed, perturbation=dict(raw.get("perturbation", {})),
                  eval=dict(raw.get("eval", {})))
        # fail early on bad plant or training values
        cfg.plant()
        cfg.plant(perturbed=True)
        cfg.train_config()
        return cfg

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def plant(self, perturbed: bool = False) -> SystemSpec:
        try:
            spec = make_system(self.system, self.system_params)
            return spec.with_params(**self.perturbation) if perturbed and self.perturbation else spec
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        kw = dict(self.train)
        kw.setdefault("seed", self.seed)
        try:
            return TrainConfig.for_system(self.system, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid training config: {exc}") from exc

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **dataclasses.asdict(self)}


# ---------------------------------------------------------------------------
# checkpoint helpers

def build_models(cfg: TrainConfig, spec: SystemSpec, K) -> tuple[LyapunovNet, ControllerNet, ResidualDynamics]:
    net = LyapunovNet.create(spec.n, cfg.phi_dims, cfg.gamma, seed=0)
    ctrl = ControllerNet.create(K, cfg.a, cfg.b, cfg.psi_hidden, spec.equilibrium_input, seed=0)
    res = ResidualDynamics.create(spec, cfg.res_hidden, seed=0)
    return net, ctrl, res


def save_checkpoint(path: str, net, ctrl, res, c: float) -> None:
    extra = ParamStore([("ctrl.K", torch.from_numpy(np.asarray(ctrl.K, dtype=float))),
                        ("ctrl.u_eq", torch.from_numpy(np.asarray(ctrl.u_eq, dtype=float))),
                        ("level.c", torch.tensor(float(c), dtype=torch.float64))])
    bundle(net, ctrl, res).merged(extra).save(path)


def load_checkpoint(path: str, cfg: TrainConfig, spec: SystemSpec):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint {path} not found")
    store = ParamStore.load(path)
    net, ctrl, res = build_models(cfg, spec, store["ctrl.K"].numpy())
    expected = bundle(net, ctrl, res)
    missing = [k for k in expected if k not in store]
    if missing:
        raise ValueError(f"checkpoint lacks parameters {missing[:5]}")
    for k in expected:
        if tuple(store[k].shape) != tuple(expected[k].shape):
            raise ValueError(f"checkpoint shape mismatch for {k}")
    unbundle(store, net, ctrl, res)
    ctrl.u_eq = store["ctrl.u_eq"].numpy().copy()
    return net, ctrl, res, float(store["level.c"])


def _out_dir(args, run: RunConfig) -> str:
    out = args.out or run.out
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path: str, obj) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args, run: RunConfig) -> int:
    cfg = run.train_config()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.iterations is not None:
        cfg = dataclasses.replace(cfg, iterations=args.iterations)
    spec = run.plant()
    out = _out_dir(args, run)
    _write_json(os.path.join(out, "config.json"), {**run.to_dict(), "resolved_train": cfg.to_dict()})
    state = initialise(cfg, spec)
    ckpt = os.path.join(out, "checkpoint.json")
    try:
        state = train(cfg, spec, state)
    except TrainingAborted as exc:
        unbundle(exc.store, state.net, state.ctrl, state.res)
        save_checkpoint(ckpt, state.net, state.ctrl, state.res, 0.0)
        write_metrics(exc.logs, os.path.join(out, "metrics.csv"))
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    write_metrics(state.logs, os.path.join(out, "metrics.csv"))
    save_checkpoint(ckpt, state.net, state.ctrl, state.res, state.final_report.c)
    _write_json(os.path.join(out, "report.json"), {
        "initial": state.initial_report.to_dict(),
        "final": state.final_report.to_dict(),
        "pretrain_mse": state.pretrain_mse,
    })
    print(state.final_report.to_json(), end="")
    return EXIT_OK


def cmd_eval(args, run: RunConfig) -> int:
    cfg = run.train_config()
    spec = run.plant(perturbed=True)
    net, ctrl, res, c = load_checkpoint(args.checkpoint, cfg, spec)
    out = _out_dir(args, run)
    mesh = build_mesh(spec, cfg.mesh_dims)
    mesh, _ = classify_mesh(cfg, spec, ctrl, mesh)
    c_now, report, mesh = level_search(mesh, net, ctrl, res, spec, cfg.kappa)
    count = int(run.eval.get("boundary_samples", 20 if spec.name == "pendulum" else 10))
    tol = float(run.eval.get("tolerance", 1e-3))
    horizon = float(run.eval.get("horizon", cfg.horizon))
    seed = args.seed if args.seed is not None else int(run.eval.get("seed", run.seed))
    rng = np.random.default_rng(seed)
    vf = value_fn_for(net)
    starts = sample_level_boundary(vf, spec, c, count, rng) if c > 0 else np.zeros((0, spec.n))
    rows = []
    for k, x0 in enumerate(starts):
        tr = rk4_rollout(spec, "true", ctrl, x0, cfg.dt, horizon, cfg.r_conv, cfg.settle_window,
                         stop_on_exit=False)
        tr.to_csv(os.path.join(out, f"boundary_{k:02d}.csv"))
        vmax = float(np.max(vf(tr.states)))
        rows.append({"index": k, "x0": [float(a) for a in x0], "v_max": vmax,
                     "stayed": bool(vmax <= c + tol), "converged": bool(tr.converged)})
    summary = {
        "level_c": c,
        "report": report.to_dict(),
        "boundary_rollouts": len(rows),
        "stayed": sum(r["stayed"] for r in rows),
        "converged": sum(r["converged"] for r in rows),
        "stayed_and_converged": sum(r["stayed"] and r["converged"] for r in rows),
        "rollouts": rows,
        "perturbation": run.perturbation,
    }
    summary["report"]["c_recomputed"] = c_now
    _write_json(os.path.join(out, "eval.json"), summary)
    mesh.to_csv(os.path.join(out, "mesh.csv"))
    print(json.dumps({k: summary[k] for k in ("level_c", "boundary_rollouts", "stayed", "converged")}))
    return EXIT_OK


def cmd_verify(args, run: RunConfig) -> int:
    cfg = run.train_config()
    spec = run.plant()
    net, ctrl, res, c = load_checkpoint(args.checkpoint, cfg, spec)
    resolution = args.resolution
    if resolution is None:
        resolution = 0.5 * build_mesh(spec, cfg.mesh_dims).tau
    result = verify_mod.falsify_grid(net, ctrl, res, spec, c, args.zeta, resolution, cfg.kappa)
    out = _out_dir(args, run)
    with open(os.path.join(out, "verify.json"), "w", newline="\n") as fh:
        fh.write(result.to_json())
    print(result.to_json(), end="")
    return EXIT_FOUND if result.found else EXIT_OK


def cmd_baseline(args, run: RunConfig) -> int:
    cfg = run.train_config()
    spec = run.plant()
    sol = lqr_for(spec)
    if args.checkpoint:
        # quadratic certificate under the trained controller
        _, ctrl, _, _ = load_checkpoint(args.checkpoint, cfg, spec)
    else:
        ctrl = ControllerNet.create(sol.K, cfg.a, cfg.b, cfg.psi_hidden, spec.equilibrium_input, seed=0)
    # decrease is judged on the nominal model: a fresh residual net contributes nothing
    res = ResidualDynamics.create(spec, cfg.res_hidden, seed=0)
    mesh = build_mesh(spec, cfg.mesh_dims)
    mesh, _ = classify_mesh(cfg, spec, ctrl, mesh)
    report, _ = lqr_roa_estimate(sol, mesh, ctrl, res, spec, cfg.kappa)
    out = _out_dir(args, run)
    payload = {"P": sol.P.tolist(), "K": sol.K.tolist(), "c": report.c,
               "riccati_residual": sol.riccati_residual, "report": report.to_dict(),
               "controller": "trained" if args.checkpoint else "lqr"}
    _write_json(os.path.join(out, "baseline.json"), payload)
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def cmd_export_smt2(args, run: RunConfig) -> int:
    cfg = run.train_config()
    spec = run.plant()
    net, ctrl, res, c = load_checkpoint(args.checkpoint, cfg, spec)
    out = _out_dir(args, run)
    path = os.path.join(out, "formula.smt2")
    try:
        verify_mod.export_smt2(net, ctrl, res, spec, c, args.zeta, cfg.kappa, args.precision, path,
                               args.max_width)
    except verify_mod.ExportTooLarge as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_ERROR
    print(path)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "baseline": cmd_baseline,
    "export-smt2": cmd_export_smt2,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roaforge", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="run configuration (JSON)")
        s.add_argument("--system", choices=SYSTEM_NAMES,
                       help="use the built-in defaults for this plant instead of --config")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int, help="torch worker threads (default: all cores)")
        if name == "train":
            s.add_argument("--iterations", type=int)
        if name in ("eval", "verify", "export-smt2"):
            s.add_argument("--checkpoint", required=True)
        if name == "baseline":
            s.add_argument("--checkpoint", help="label the mesh under the trained controller")
        if name in ("verify", "export-smt2"):
            s.add_argument("--zeta", type=float, default=verify_mod.ZETA)
        if name == "verify":
            s.add_argument("--resolution", type=float, help="grid spacing (default: half the mesh spacing)")
        if name == "export-smt2":
            s.add_argument("--precision", type=float, default=verify_mod.PRECISION)
            s.add_argument("--max-width", type=int, default=verify_mod.MAX_EXPORT_WIDTH)
    return p


def _setup_logging() -> None:
    level = os.environ.get("ROAFORGE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            run = RunConfig.load(args.config)
        elif args.system:
            run = RunConfig.from_dict({"schema_version": SCHEMA_VERSION, "system": args.system,
                                       "out": os.path.join("runs", args.system)})
        else:
            raise ConfigError("either --config or --system is required")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if getattr(args, "iterations", None) is not None and args.iterations < 0:
            raise ConfigError("--iterations must be non-negative")
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_ERROR
    torch.set_num_threads(args.threads if args.threads else (os.cpu_count() or 1))
    try:
        return COMMANDS[args.command](args, run)
    except (FileNotFoundError, ValueError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
