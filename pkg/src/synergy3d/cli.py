"""Command-line entry point.

Exit status: 0 success, 1 usage error, 2 data or numeric failure. Failures
print a single ``E:<kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics, textconfig
from .morphable import (
    N_PARAMS,
    NOSE_TIP,
    ParamVector,
    apply_pose,
    decompose_pose,
    full_forward,
    load_basis,
    reconstruct_frontal,
    rotation_to_euler,
    save_basis,
    write_obj,
)
from .synergy.config import NetConfig, desk_config, load_net_config
from .synthdata import SynthConfig, load_dataset, load_synth_config, make_synthetic_basis, sample_dataset, save_dataset
from .trainer import TrainConfig, TrainingError, format_grid, load_model, run_ablation_grid, table_configs, train

PROTOCOLS = ("align", "orient", "p1", "p2", "florence")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclasses.dataclass(frozen=True)
class GridConfig:
    """``ablate --grid`` file: which data, which variants, which seeds."""

    version: int = 1
    data: str = ""
    basis: str = ""
    net_config: str = ""
    train_config: str = ""
    kind: str = "modes"
    seeds: tuple = ()
    out_dir: str = ""
    report: str = ""


def _seed(value, config_path=None):
    """Seed precedence: flag, then an explicit ``seed`` key in the config file, then SYNERGY3D_SEED, then 0."""
    if value is not None:
        return value
    if config_path:
        explicit = textconfig.parse_text(Path(config_path).read_text())
        if "seed" in explicit:
            return int(explicit["seed"])
    env = os.environ.get("SYNERGY3D_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"SYNERGY3D_SEED must be an integer, got {env!r}") from None


def _echo(path: Path, command: str, args, **extra):
    """Write the resolved arguments next to an output; no timestamps, so reruns are byte-identical."""
    values = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    values.update(extra)
    Path(path).write_text(json.dumps({"command": command, "args": values}, indent=2, sort_keys=True) + "\n")


def _echo_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".echo.json")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed JSON ({exc})") from exc


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _landmark_rows(lmk_3xn) -> list:
    return [[float(v) for v in row] for row in np.asarray(lmk_3xn).T]


def _rows_to_landmarks(rows) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("landmarks must be a list of [x, y, z] rows")
    return arr.T


# --- subcommands ----------------------------------------------------------------


def cmd_synth_basis(args):
    basis = make_synthetic_basis(_seed(args.seed), args.vertices)
    save_basis(basis, args.out)
    _echo(_echo_path(args.out), "synth-basis", args, seed=_seed(args.seed))


def cmd_synth_data(args):
    basis = load_basis(args.basis)
    cfg = load_synth_config(args.config) if args.config else SynthConfig()
    cfg = dataclasses.replace(cfg, seed=_seed(args.seed, args.config))
    ds = sample_dataset(basis, cfg)
    save_dataset(ds, args.out)
    _echo(_echo_path(args.out), "synth-data", args, synth_config=cfg.to_dict())


def _net_config(path) -> NetConfig:
    return load_net_config(path) if path else desk_config()


def _train_config(path, args) -> TrainConfig:
    tc = textconfig.load(TrainConfig, path) if path else TrainConfig()
    updates = {"jobs": args.jobs, "seed": _seed(args.seed, path)}
    if getattr(args, "mode", None):
        updates["mode"] = args.mode
    return dataclasses.replace(tc, **updates)


def cmd_train(args):
    basis = load_basis(args.basis)
    ds = load_dataset(args.data)
    net_cfg = _net_config(args.net_config)
    tc = _train_config(args.train_config, args)
    out = Path(args.out_dir)
    result = train(ds, basis, net_cfg, tc, out_dir=out)
    _echo(out / "config_echo.json", "train", args, train_config=dataclasses.asdict(tc))
    last = result.log[-1]
    print(f"best epoch {result.best_epoch}; last epoch val NME {last['val_nme']:.6f}, MAE {last['val_mae']:.4f}")


def _predictions(args, ds, basis):
    """(params S x 62 or None, landmarks S x 3 x N or None) from a checkpoint or a JSON file."""
    if args.checkpoint:
        model = load_model(args.checkpoint, basis)
        params, refined, _ = model.predict(ds.observations)
        return params, refined
    obj = _read_json(args.predictions)
    if not isinstance(obj, dict):
        raise ValueError("predictions file must be a JSON object with 'params' and/or 'landmarks'")
    params = np.asarray(obj["params"], dtype=np.float64) if "params" in obj else None
    lmk = None
    if "landmarks" in obj:
        lmk = np.stack([_rows_to_landmarks(rows) for rows in obj["landmarks"]])
    for arr, name in ((params, "params"), (lmk, "landmarks")):
        if arr is not None and len(arr) != len(ds):
            raise ValueError(f"{len(arr)} predicted {name} for {len(ds)} samples")
    if params is not None and params.shape[1:] != (N_PARAMS,):
        raise ValueError(f"params rows must have {N_PARAMS} entries")
    return params, lmk


def _meshes(basis, vec, posed):
    p = ParamVector.from_vector(np.asarray(vec, dtype=np.float64))
    if posed:
        return full_forward(basis, p)[0]
    return reconstruct_frontal(basis, p.shape, p.expr)


def _euler_rows(params):
    out = []
    for row in params:
        try:
            out.append(rotation_to_euler(decompose_pose(row[:12]).rotation))
        except ValueError:
            out.append((np.nan, np.nan, np.nan))
    return np.asarray(out)


def cmd_eval(args):
    ds = load_dataset(args.data)
    basis = load_basis(args.basis) if args.basis else None
    params, lmk = _predictions(args, ds, basis)
    if basis is None and (args.protocol in ("p1", "p2", "florence") or (args.protocol == "align" and lmk is None)):
        raise UsageError(f"eval --protocol {args.protocol} on parameter predictions needs --basis")
    echo = {"protocol": args.protocol, "data": str(args.data),
            "source": str(args.checkpoint or args.predictions), "dims": args.dims}
    yaw = ds.euler[:, 0]
    if args.protocol == "align":
        if lmk is None:
            if params is None:
                raise ValueError("align needs predicted landmarks or params")
            lmk = np.stack([full_forward(basis, ParamVector.from_vector(v))[1] for v in params])
        per = metrics.batch_nme(lmk, ds.landmarks, ds.bbox, dims=args.dims)
        report = metrics.alignment_report(metrics.binned_nme(per, yaw), echo)
    elif args.protocol == "orient":
        if params is None:
            raise ValueError("orient needs predicted params")
        euler = _euler_rows(params)
        if np.isnan(euler).any():
            raise FloatingPointError("a predicted pose block is degenerate")
        report = metrics.orientation_report(metrics.euler_mae(euler, ds.euler), echo)
    else:
        if params is None:
            raise ValueError(f"{args.protocol} needs predicted params")
        errors = []
        for pred, gt, bb in zip(params, ds.params.astype(np.float64), ds.bbox):
            if args.protocol == "p2":
                errors.append(metrics.modeling_error_p2(_meshes(basis, pred, True), _meshes(basis, gt, True), bb))
            elif args.protocol == "p1":
                errors.append(metrics.modeling_error_p1(_meshes(basis, pred, False), _meshes(basis, gt, False),
                                                        landmark_indices=basis.landmark_indices))
            else:
                nose = int(basis.landmark_indices[NOSE_TIP])
                errors.append(metrics.florence_rmse(_meshes(basis, pred, False), _meshes(basis, gt, False),
                                                    basis.triangles, nose))
        report = metrics.modeling_report(args.protocol, errors, yaw, echo)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.report:
        Path(args.report).write_text(text)
        _echo(_echo_path(args.report), "eval", args)
    else:
        sys.stdout.write(text)


def cmd_ablate(args):
    grid = textconfig.load(GridConfig, args.grid)
    if not grid.data or not grid.basis:
        raise ValueError(f"{args.grid}: 'data' and 'basis' are required")
    base = Path(args.grid).parent
    rel = lambda p: p if Path(p).is_absolute() else base / p  # noqa: E731
    basis = load_basis(rel(grid.basis))
    ds = load_dataset(rel(grid.data))
    net_cfg = _net_config(rel(grid.net_config) if grid.net_config else "")
    tc = _train_config(rel(grid.train_config) if grid.train_config else "", args)
    seeds = tuple(grid.seeds) or (tc.seed,)
    out_dir = Path(args.out_dir or (rel(grid.out_dir) if grid.out_dir else base / "ablation"))
    report = {"kind": grid.kind, "seeds": list(seeds), "rows": []}
    for seed in seeds:
        rows = run_ablation_grid(ds, basis, table_configs(net_cfg, grid.kind),
                                 dataclasses.replace(tc, seed=seed), out_dir=out_dir / f"seed{seed}")
        print(f"seed {seed}\n{format_grid(rows)}")
        report["rows"] += [{"seed": seed, **r.as_dict()} for r in rows]
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(Path(args.report) if args.report else out_dir / "grid_report.json", report)
    _echo(out_dir / "config_echo.json", "ablate", args, grid=dataclasses.asdict(grid),
          train_config=dataclasses.asdict(tc))


def _read_observation(path, n_landmarks):
    obj = _read_json(path)
    arr = np.asarray(obj["observation"] if isinstance(obj, dict) else obj, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 3:
        arr = arr.reshape(-1)
    if arr.ndim != 1 or arr.size != 3 * n_landmarks:
        raise ValueError(f"observation must hold {n_landmarks} (x, y, visible) triples")
    return arr


def cmd_infer(args):
    basis = load_basis(args.basis)
    model = load_model(args.checkpoint, basis)
    obs = _read_observation(args.observation, model.cfg.n_landmarks)
    params, refined, _ = model.predict(obs[None])
    _write_json(args.out_landmarks, _landmark_rows(refined[0]))
    _write_json(args.out_params, [float(v) for v in params[0]])
    _echo(_echo_path(args.out_params), "infer", args)


def cmd_export_mesh(args):
    basis = load_basis(args.basis)
    obj = _read_json(args.params)
    vec = np.asarray(obj["params"] if isinstance(obj, dict) else obj, dtype=np.float64)
    p = ParamVector.from_vector(vec)
    verts = reconstruct_frontal(basis, p.shape, p.expr)
    if args.posed:
        verts = apply_pose(verts, decompose_pose(p.pose))
    write_obj(args.out, verts, basis.triangles)
    _echo(_echo_path(args.out), "export-mesh", args)


# --- parser ------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="synergy3d", description=__doc__.splitlines()[0])
    parser.add_argument("--jobs", type=int, default=1, help="worker cap for data-parallel training")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-basis", help="generate a synthetic morphable basis")
    p.add_argument("--seed", type=int)
    p.add_argument("--vertices", type=int, default=2000)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth_basis)

    p = sub.add_parser("synth-data", help="sample an observation/groundtruth dataset")
    p.add_argument("--basis", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train one network")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--basis", type=Path, required=True)
    p.add_argument("--net-config", type=Path)
    p.add_argument("--train-config", type=Path)
    p.add_argument("--mode", choices=("baseline", "mafa", "l2m", "full"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions under one protocol")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--predictions", type=Path, help="JSON object with 'params' and/or 'landmarks'")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--basis", type=Path)
    p.add_argument("--protocol", choices=PROTOCOLS, required=True)
    p.add_argument("--dims", type=int, choices=(2, 3), default=2)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score an ablation grid")
    p.add_argument("--grid", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("infer", help="run a trained network on one observation")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--basis", type=Path, required=True)
    p.add_argument("--observation", type=Path, required=True)
    p.add_argument("--out-landmarks", type=Path, required=True)
    p.add_argument("--out-params", type=Path, required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-mesh", help="write the face for a parameter vector as OBJ")
    p.add_argument("--params", type=Path, required=True)
    p.add_argument("--basis", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--posed", action="store_true", help="apply the pose block instead of the frontal face")
    p.set_defaults(func=cmd_export_mesh)
    return parser


def _fail(kind, message, code):
    first = str(message).strip().splitlines()[0] if str(message).strip() else kind
    print(f"E:{kind}: {first}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        if args.command == "eval" and args.checkpoint and not args.basis:
            raise UsageError("eval --checkpoint needs --basis")
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail("usage", exc, 1)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail("io", f"{exc.strerror or exc}: {exc.filename}", 2)
    except (KeyError, textconfig.ConfigError) as exc:
        return _fail("format", exc, 2)
    except (TrainingError, FloatingPointError) as exc:
        return _fail("numeric", exc, 2)
    except (ValueError, IndexError, OSError) as exc:
        return _fail("data", exc, 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
