"""Command-line interface: preprocess, train, simulate, eval, bench.

Exit codes: 0 success, 1 runtime failure, 2 validation failure. Every
subcommand echoes its effective config to stdout, and subcommands with an
output directory write config.json there.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import geodesic as geo
from . import gsa as gsa_mod
from . import lsdmp
from . import physics as phys
from . import sim
from . import tensor as T
from . import trainer
from .config import (RunConfig, SceneSpec, config_from_dict, config_to_dict,
                     load_config, save_config)
from .errors import ValidationError
from .mesh import build_topology, compute_rest_quantities, grid_cloth, load_obj

EVAL_COLUMNS = ("stretch", "bending", "inertia", "collision", "friction", "gravity")


def _echo_config(cfg: RunConfig) -> None:
    print("effective config: " + json.dumps(config_to_dict(cfg), sort_keys=True))


# -- preprocess ---------------------------------------------------------------

def cmd_preprocess(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.embed_dim is not None:
        cfg.geodesic.embed_dim = args.embed_dim
    gcfg = cfg.geodesic
    _echo_config(cfg)
    mesh = load_obj(args.garment, kind="garment")
    topo = build_topology(mesh)
    if topo.nonmanifold_edge_count:
        print(f"diagnostics: {topo.nonmanifold_edge_count} non-manifold edge(s) "
              f"excluded from bending", file=sys.stderr)
    rest = compute_rest_quantities(mesh, topo, cfg.mesh.density)
    dist = geo.geodesic_distances(topo, rest)
    emb = geo.mds_embed(dist, k=gcfg.embed_dim, max_iters=gcfg.mds_max_iters,
                        tol=gcfg.mds_tol, seed=args.seed)
    out = Path(args.out) if args.out else Path(geo.default_embedding_path(args.garment))
    geo.save_embedding(out, emb, seed=args.seed,
                       distances=dist if args.keep_distances else None)
    iters = len(emb.stress_history) if emb.stress_history is not None else 0
    print(f"wrote {out}: {mesh.n_vertices} vertices, k={gcfg.embed_dim}, "
          f"final stress {emb.final_stress:.6e} after {iters} iterations")
    return 0


# -- train ---------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.iters is not None:
        cfg.trainer.iterations = args.iters
    if args.seed is not None:
        cfg.trainer.seed = args.seed
    _echo_config(cfg)
    result = trainer.train(cfg, args.out, quiet=args.quiet)
    print(f"wrote {result.checkpoint_path} and {result.log_path}")
    return 0


# -- checkpoint loading shared by simulate/eval/bench ---------------------------

def _load_model(ckpt_path) -> tuple[T.ModelParams, RunConfig]:
    state, header = T.load_checkpoint(ckpt_path)
    cfg = config_from_dict(header.get("config", {}))
    params = sim.build_model_params(cfg.model, cfg.geodesic.embed_dim,
                                    seed=header.get("seed", 0))
    missing = set(params.names()) ^ set(state)
    if missing:
        raise ValidationError(
            f"{ckpt_path}: parameter set does not match its config ({sorted(missing)[:4]}...)")
    params.load_state_dict(state)
    return params, cfg


def _check_embedding_dim(scene: sim.Scene, cfg: RunConfig, garment: str) -> None:
    k = scene.embedding.shape[1]
    if k != cfg.geodesic.embed_dim:
        raise ValidationError(
            f"garment {garment} has embedding dimension {k} but the checkpoint "
            f"was trained with {cfg.geodesic.embed_dim}")


# -- simulate -------------------------------------------------------------------

def cmd_simulate(args) -> int:
    params, cfg = _load_model(args.ckpt)
    if args.dt is not None:
        if args.dt <= 0:
            raise ValidationError(f"--dt must be > 0, got {args.dt}")
        cfg.physics.dt = args.dt
    if args.frames < 1:
        raise ValidationError("--frames must be >= 1")
    _echo_config(cfg)
    spec = SceneSpec(garment=args.garment, body=args.body)
    scene = sim.scene_from_spec(spec, cfg)
    _check_embedding_dim(scene, cfg, args.garment)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(out_dir / "config.json", cfg)
    state = sim.initial_state(scene.garment, scene.body, cfg)
    records = sim.rollout(state, params, args.frames, scene, out_dir=out_dir)
    worst = max(r["max_penetration"] for r in records)
    print(f"wrote {args.frames} frames to {out_dir}; "
          f"worst penetration {worst:.4e} m")
    return 0


# -- eval -------------------------------------------------------------------------

def evaluate_scenes(params: T.ModelParams, cfg: RunConfig,
                    specs: list[SceneSpec], frames: int) -> list[dict]:
    """Rollout each scene and average the raw per-term losses across frames."""
    rows = []
    for spec in specs:
        scene = sim.scene_from_spec(spec, cfg)
        _check_embedding_dim(scene, cfg, spec.garment)
        state = sim.initial_state(scene.garment, scene.body, cfg)
        records = sim.rollout(state, params, frames, scene)
        row = {"scene": f"{Path(spec.garment).stem}/{spec.body}"}
        for key in EVAL_COLUMNS:
            row[key] = float(np.mean([r[key] for r in records]))
        row["total"] = sum(cfg.physics.weights[k] * row[k] for k in EVAL_COLUMNS)
        rows.append(row)
    return rows


def format_report(rows: list[dict], cfg: RunConfig) -> str:
    header = ["# eslrsim eval report",
              "# total = sum_k weight_k * term_k; weights: "
              + json.dumps(cfg.physics.weights, sort_keys=True),
              "# term formulas:"]
    header += [f"#   {name}: {formula}"
               for name, formula in phys.TERM_FORMULAS.items()]
    cols = [c.capitalize() for c in EVAL_COLUMNS] + ["Total"]
    lines = header + ["scene".ljust(36) + "".join(c.rjust(17) for c in cols)]
    for row in rows:
        cells = [f"{row[c]:.9E}".rjust(17) for c in EVAL_COLUMNS + ("total",)]
        lines.append(row["scene"].ljust(36) + "".join(cells))
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    params, cfg = _load_model(args.ckpt)
    _echo_config(cfg)
    with open(args.scenes, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{args.scenes}: invalid JSON: {e}") from None
    if not isinstance(raw, list):
        raise ValidationError(f"{args.scenes}: expected a JSON list of scenes")
    allowed = {"garment", "body", "amplitude", "frequency", "embedding"}
    specs = []
    for i, entry in enumerate(raw):
        unknown = set(entry) - allowed
        if unknown:
            raise ValidationError(f"{args.scenes}[{i}]: unknown key(s) {sorted(unknown)}")
        specs.append(SceneSpec(**entry))
    frames = args.frames if args.frames is not None else cfg.sim.eval_frames
    rows = evaluate_scenes(params, cfg, specs, frames)
    report = format_report(rows, cfg)
    Path(args.report).write_text(report, encoding="utf-8")
    print(report, end="")
    print(f"wrote {args.report}")
    return 0


# -- bench -------------------------------------------------------------------------

def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    except ImportError:  # timing is less stable but still usable
        import contextlib
        return contextlib.nullcontext()


def _median_time(fn, repeats: int = 3) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def run_bench(sizes: list[int], layer_counts: list[int], cfg: RunConfig,
              params: T.ModelParams | None = None, seed: int = 0) -> list[dict]:
    """Wall-time per synthetic grid size for the short-range stack, the
    long-range stack, and the full step at each layer count."""
    if params is None:
        params = sim.build_model_params(cfg.model, cfg.geodesic.embed_dim, seed)
    rng = np.random.default_rng(seed)
    results = []
    max_layers = max([cfg.model.lsdmp_layers] + layer_counts)
    with _limit_threads():
        for size in sizes:
            side = max(2, int(round(np.sqrt(size))))
            mesh = grid_cloth(side, side)
            n = mesh.n_vertices
            embedding = rng.standard_normal((n, cfg.geodesic.embed_dim))
            garment = sim.garment_assets_from_mesh(mesh, cfg, embedding)
            scene = sim.build_scene(garment,
                                    sim.make_body_motion("static_sphere", cfg), cfg)
            state = sim.initial_state(garment, scene.body, cfg)
            world = np.zeros((0, 2), dtype=np.intp)
            lg = None

            def encode_once():
                positions = state.x_g
                velocities = state.q_g
                normals = np.zeros_like(positions)
                return lsdmp.encode(params, positions, velocities,
                                    mesh.vertices, normals, n,
                                    garment.topo.mesh_edges,
                                    len(garment.topo.mesh_edges), world)

            with T.no_grad():
                lg = encode_once()
                t_lsdmp = _median_time(lambda: lsdmp.lsdmp_forward(
                    lg, params, cfg.model.lsdmp_layers, cfg.model.smoothing_steps))
                t_gsa = _median_time(lambda: gsa_mod.gsa_forward(
                    lg.vertex_feats, n, embedding, params, cfg.model.gsa_blocks))
                step_times = {}
                for n_layers in layer_counts:
                    if n_layers > cfg.model.lsdmp_layers:
                        raise ValidationError(
                            f"--layers {n_layers} exceeds model depth "
                            f"{cfg.model.lsdmp_layers}")
                    scene.cfg = _with_layers(cfg, n_layers)
                    step_times[n_layers] = _median_time(
                        lambda: sim.step(state, params, scene))
                scene.cfg = cfg
            results.append({"vertices": n, "lsdmp_s": t_lsdmp, "gsa_s": t_gsa,
                            "step_s": step_times})
    return results


def _with_layers(cfg: RunConfig, n_layers: int) -> RunConfig:
    clone = config_from_dict(config_to_dict(cfg))
    clone.model.lsdmp_layers = n_layers
    return clone


def cmd_bench(args) -> int:
    if args.ckpt:
        params, cfg = _load_model(args.ckpt)
    else:
        cfg = load_config(args.config) if args.config else RunConfig()
        params = None
    sizes = [int(s) for s in args.sizes.split(",") if s]
    layer_counts = [int(s) for s in args.layers.split(",") if s]
    if not sizes:
        raise ValidationError("--sizes needs at least one vertex count")
    for n_layers in layer_counts:
        if n_layers > cfg.model.lsdmp_layers:
            raise ValidationError(
                f"--layers {n_layers} exceeds model depth {cfg.model.lsdmp_layers}")
    _echo_config(cfg)
    results = run_bench(sizes, layer_counts, cfg, params, seed=args.seed)
    step_cols = "".join(f"  step(L={l})_ms" for l in layer_counts)
    print(f"{'vertices':>9}  {'lsdmp_ms':>9}  {'gsa_ms':>9}{step_cols}")
    for row in results:
        steps = "".join(f"  {row['step_s'][l] * 1e3:12.3f}" for l in layer_counts)
        print(f"{row['vertices']:>9}  {row['lsdmp_s'] * 1e3:9.3f}  "
              f"{row['gsa_s'] * 1e3:9.3f}{steps}")
    if len(results) > 1:
        print("scaling ratios (consecutive sizes):")
        for prev, cur in zip(results, results[1:]):
            nr = cur["vertices"] / prev["vertices"]
            print(f"  n x{nr:.2f}: lsdmp x{cur['lsdmp_s'] / prev['lsdmp_s']:.2f}, "
                  f"gsa x{cur['gsa_s'] / prev['gsa_s']:.2f}")
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eslrsim",
        description="Garment simulation with smoothing-extended message passing "
                    "and geodesic linear attention")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="compute geodesic embeddings for a garment")
    p.add_argument("--garment", required=True)
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--out", default=None, help="default: sibling .geo1 file")
    p.add_argument("--keep-distances", action="store_true",
                   help="retain the full distance matrix in the output file")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train", help="unsupervised training with physics losses")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("simulate", help="autoregressive rollout to OBJ frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--garment", required=True)
    p.add_argument("--body", required=True, choices=sim.PRESETS)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("eval", help="per-scene physics-loss report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenes", required=True, help="JSON list of scene specs")
    p.add_argument("--report", required=True)
    p.add_argument("--frames", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="wall-time scaling across mesh sizes")
    p.add_argument("--sizes", required=True, help="comma-separated vertex counts")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--layers", default="10,15",
                   help="comma-separated layer counts for full-step timing")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
