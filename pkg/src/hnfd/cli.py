"""``hnfd`` command-line entry point.

Settings come from built-in defaults, then an optional flat ``key=value``
file (``--config``), then ``--key value`` flags; the last source wins.
Every run writes ``resolved_config.txt`` into ``--out``. Exit codes: 0 on
success, 1 on usage or configuration errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, HNFDError
from .field import FieldConfig, build_field, load_checkpoint, save_checkpoint
from .operators import OperatorSpec

log = logging.getLogger("hnfd")

ARCH_NAMES = {"dense": "DenseGrid", "hash": "HashGrid", "triplane": "TriPlane"}
LOSS_NAMES = {"mse": "MSE", "eikonal": "Eikonal", "fdeikonal": "FDEikonal", "ft": "FT"}


class UsageError(Exception):
    pass


def _floats(text):
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _method_list(text):
    return tuple(v for v in str(text).replace(",", " ").split())


# key -> (parser, default, help)
KEYS = {
    "seed": (int, 0, "global random seed"),
    "out": (str, ".", "output directory"),
    "shape": (str, "sphere", "benchmark shape: circle, unit_circle, sphere, torus, box"),
    "arch": (str, "dense", "field architecture: dense, hash, triplane"),
    "levels": (int, 4, "grid levels"),
    "min_res": (int, 0, "coarsest resolution, vertices per axis (0 = per-shape default)"),
    "max_res": (int, 64, "finest resolution, vertices per axis"),
    "feature_dim": (int, 2, "features per grid level"),
    "hash_table_size": (int, 2**14, "hash table rows per level"),
    "plane_res": (int, 64, "tri-plane resolution"),
    "plane_feature_dim": (int, 8, "tri-plane feature width"),
    "hidden_layers": (int, 2, "MLP hidden layers"),
    "hidden_width": (int, 64, "MLP hidden width"),
    "steps": (int, 3000, "optimisation or time steps"),
    "lr": (float, 0.0, "learning rate (0 = per-command default)"),
    "batch_size": (int, 4096, "points per optimisation step"),
    "loss": (str, "mse", "training loss: mse, eikonal, fdeikonal"),
    "warm_start": (int, 0, "MSE steps before switching to gradient supervision"),
    "eikonal_weight": (float, 1e-3, "eikonal penalty weight"),
    "ckpt": (str, "", "input checkpoint"),
    "method": (str, "poly", "gradient operator: ad, fd, poly, poly2, sfd, gad"),
    "methods": (_method_list, ("ad", "fd", "poly"), "operators to evaluate"),
    "sigma": (float, 0.0, "neighbourhood std (0 = command default; eval searches)"),
    "sigmas": (_floats, (), "ensemble sigma list for finetune"),
    "k": (int, 256, "samples per neighbourhood"),
    "h": (float, 0.0, "finite-difference step (0 = command default; eval sweeps)"),
    "n_samples": (int, 1, "SFD direction samples"),
    "points": (str, "", "text file with one query point per line"),
    "n_points": (int, 4096, "ground-truth surface samples"),
    "start": (_floats, (), "slice start point"),
    "end": (_floats, (), "slice end point"),
    "n_fft": (int, 256, "slice samples (power of two)"),
    "res": (int, 256, "image width and height"),
    "fov": (float, 40.0, "vertical field of view, degrees"),
    "mode": (str, "normals", "render mode: normals, lambertian, specular_env"),
    "trials": (int, 10000, "collision trials"),
    "grid_res": (int, 128, "advection grid resolution"),
    "queries": (int, 1000, "benchmark queries per run"),
    "repeats": (int, 7, "benchmark runs"),
}

ARCH_KEYS = ("shape", "arch", "levels", "min_res", "max_res", "feature_dim", "hash_table_size",
             "plane_res", "plane_feature_dim", "hidden_layers", "hidden_width")
OP_KEYS = ("method", "sigma", "k", "h", "n_samples")

COMMANDS = {
    "train": ARCH_KEYS + ("steps", "lr", "batch_size", "loss", "warm_start", "eikonal_weight",
                          "sigma", "k"),
    "finetune": ("ckpt", "shape", "steps", "lr", "batch_size", "sigmas", "n_points") + OP_KEYS,
    "query": ("ckpt", "points") + OP_KEYS,
    "sweep": ("ckpt", "shape", "method", "k", "n_points"),
    "eval": ("ckpt", "shape", "methods", "sigma", "k", "h", "n_samples", "n_points"),
    "spectrum": ("ckpt", "shape", "start", "end", "n_fft"),
    "render": ("ckpt", "shape", "res", "fov", "mode") + OP_KEYS,
    "collide": ("ckpt", "shape", "trials") + OP_KEYS,
    "advect": ("steps", "grid_res") + OP_KEYS,
    "bench": ("ckpt", "queries", "repeats") + OP_KEYS,
}
COMMON = ("seed", "out")

SHAPE_DEFAULT_MIN_RES = {2: 4, 3: 8}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="hnfd", description="Hybrid neural fields with polynomial-fitting operators.")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, keys in COMMANDS.items():
        sp = sub.add_parser(name, help=f"{name} subcommand")
        sp.error = p.error
        sp.add_argument("--config", default=None, help="flat key=value settings file")
        for key in COMMON + keys:
            _, default, text = KEYS[key]
            sp.add_argument(f"--{key}", dest=key, default=None, help=f"{text} (default {default!r})")
    return p


def read_config_file(path, allowed):
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        if key not in allowed:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = val.strip()
    return values


def resolve(command, flags, config_path=None):
    """Merge defaults < file < flags and parse each value."""
    allowed = COMMON + COMMANDS[command]
    raw = {k: None for k in allowed}
    if config_path:
        raw.update(read_config_file(config_path, allowed))
    for k, v in flags.items():
        if v is not None:
            raw[k] = v
    out = {}
    for k in allowed:
        conv, default, _ = KEYS[k]
        if raw[k] is None:
            out[k] = default
            continue
        try:
            out[k] = conv(raw[k])
        except ValueError:
            raise UsageError(f"bad value for {k}: {raw[k]!r}") from None
    return out


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def write_resolved(cfg, command, out):
    lines = [f"command={command}"] + [f"{k}={_fmt(cfg[k])}" for k in sorted(cfg)]
    threads = os.environ.get("HNFD_THREADS", "0")
    lines.append(f"threads={threads}")
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _threads():
    raw = os.environ.get("HNFD_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HNFD_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("HNFD_THREADS must be >= 0")
    return n


# ---------------------------------------------------------------- helpers

def _oracle(cfg):
    from .geometry import shape_by_name

    return shape_by_name(cfg["shape"])


def _field_config(cfg, dim):
    arch = ARCH_NAMES.get(cfg["arch"])
    if arch is None:
        raise ConfigError(f"unknown arch {cfg['arch']!r}; expected one of {sorted(ARCH_NAMES)}")
    return FieldConfig(
        arch=arch, input_dim=dim, levels=cfg["levels"],
        min_res=cfg["min_res"] or SHAPE_DEFAULT_MIN_RES[dim], max_res=cfg["max_res"],
        feature_dim=cfg["feature_dim"], hash_table_size=cfg["hash_table_size"],
        plane_res=cfg["plane_res"], plane_feature_dim=cfg["plane_feature_dim"],
        mlp_hidden_layers=cfg["hidden_layers"], mlp_hidden_width=cfg["hidden_width"],
    )


def _op(cfg, sigma_default=0.01, h_default=2.0 / 64):
    return OperatorSpec(cfg["method"], sigma=cfg["sigma"] or sigma_default, k=cfg["k"],
                        h=cfg["h"] or h_default, n_samples=cfg["n_samples"], seed=cfg["seed"])


def _ckpt(cfg):
    if not cfg["ckpt"]:
        raise ConfigError("--ckpt is required")
    return load_checkpoint(cfg["ckpt"])


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _samples(oracle, cfg):
    from .geometry import sample_surface

    return sample_surface(oracle, cfg["n_points"], seed=cfg["seed"] + 1)


# ---------------------------------------------------------------- commands

def cmd_train(cfg, out):
    from . import training

    oracle = _oracle(cfg)
    fc = _field_config(cfg, oracle.input_dim)
    loss = LOSS_NAMES.get(cfg["loss"])
    if loss is None or loss == "FT":
        raise ConfigError(f"train loss must be mse, eikonal or fdeikonal, got {cfg['loss']!r}")
    tc = training.TrainConfig.pretraining(
        steps=cfg["steps"], lr=cfg["lr"] or 5e-3, batch_size=cfg["batch_size"], loss=loss,
        warm_start=cfg["warm_start"], eikonal_weight=cfg["eikonal_weight"], seed=cfg["seed"],
        grad_op=OperatorSpec("poly", sigma=cfg["sigma"] or 0.01, k=cfg["k"], seed=cfg["seed"]),
    )
    if cfg["warm_start"]:
        res = training.train_warm_start(build_field(fc, cfg["seed"]), oracle, tc)
    else:
        res = training.pretrain_sdf(build_field(fc, cfg["seed"]), oracle, tc)
    save_checkpoint(res.field, out / "field.hnfd")
    training.write_loss_csv(res, out / "train_loss.csv")
    print(f"final loss {res.final_loss:.6e}; wrote {out / 'field.hnfd'}")


def cmd_finetune(cfg, out):
    from . import training

    field = _ckpt(cfg)
    op = _op(cfg)
    tc = training.TrainConfig.finetuning(steps=cfg["steps"], lr=cfg["lr"] or 2e-3,
                                         batch_size=cfg["batch_size"], grad_op=op, seed=cfg["seed"])
    if cfg["sigmas"]:
        res = training.ensemble_finetune(field, cfg["sigmas"], tc, _samples(_oracle(cfg), cfg))
    else:
        res = training.finetune(field, tc)
    save_checkpoint(res.field, out / "finetuned.hnfd")
    training.write_loss_csv(res, out / "finetune_loss.csv")
    print(f"sigma {res.sigma_used!r}; final loss {res.final_loss:.6e}")


def _read_points(path, dim):
    text = Path(path).read_text().replace(",", " ")
    rows = [ln.split("#")[0].split() for ln in text.splitlines()]
    rows = [r for r in rows if r]
    try:
        pts = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if pts.ndim != 2 or pts.shape[1] != dim:
        raise ConfigError(f"{path}: expected {dim} coordinates per line")
    return pts


def cmd_query(cfg, out):
    field = _ckpt(cfg)
    if not cfg["points"]:
        raise ConfigError("--points is required")
    pts = _read_points(cfg["points"], field.input_dim)
    op = _op(cfg)
    g = op.gradient_batch(field, pts)
    m = field.input_dim
    header = [f"x{i}" for i in range(m)] + [f"g{i}" for i in range(m)]
    rows = [[repr(float(v)) for v in np.concatenate([p, gi])] for p, gi in zip(pts, g)]
    path = _write_csv(out / f"query_{cfg['method']}.csv", header, rows)
    print(f"wrote {len(rows)} gradients to {path}")


def cmd_sweep(cfg, out):
    from . import operators

    field = _ckpt(cfg)
    samples = _samples(_oracle(cfg), cfg)
    if cfg["method"] == "fd":
        best, hist = operators.select_fd_step(field, samples)
    elif cfg["method"] in ("poly", "gad"):
        best, hist = operators.select_sigma(field, samples, k=cfg["k"], seed=cfg["seed"],
                                            method=cfg["method"])
    else:
        raise ConfigError("sweep supports methods poly, gad and fd")
    _write_csv(out / f"sweep_{cfg['shape']}_{cfg['method']}.csv", ["value", "objective"],
               [[repr(float(s)), repr(float(v))] for s, v in hist])
    print(repr(float(best)))


def cmd_eval(cfg, out):
    from . import evaluation, operators, training

    field = _ckpt(cfg)
    oracle = _oracle(cfg)
    samples = _samples(oracle, cfg)
    zero = training.project_to_zero_set(field, samples.positions)
    cd, fs = evaluation.chamfer_fscore(zero, samples.positions) if len(zero) else (None, None)
    curv_ok = bool(getattr(oracle, "exact", True)) and np.all(np.isfinite(samples.curvatures))
    m = field.input_dim
    rows = []
    for method in cfg["methods"]:
        if method == "fd":
            h = cfg["h"] or operators.select_fd_step(field, samples)[0]
            op = OperatorSpec("fd", h=h)
        elif method in ("poly", "poly2", "gad", "sfd"):
            sigma = cfg["sigma"] or operators.select_sigma(
                field, samples, k=cfg["k"], seed=cfg["seed"],
                method="gad" if method == "gad" else "poly")[0]
            op = OperatorSpec(method, sigma=sigma, k=cfg["k"], n_samples=cfg["n_samples"],
                              seed=cfg["seed"])
        elif method == "ad":
            op = OperatorSpec("ad")
        else:
            raise ConfigError(f"unknown method {method!r}")
        g = op.gradient_batch(field, samples.positions)
        hp = {} if method == "ad" else ({"h": op.h} if method == "fd" else {"sigma": op.sigma})
        rep = evaluation.normal_metrics(g, samples.normals, op.tag, hp)
        if curv_ok and method in ("fd", "poly", "poly2"):
            lap = op.laplacian_batch(field, samples.positions)
            rep.rre = evaluation.curvature_rre(lap / (m - 1), samples.curvatures)
        rep.cd, rep.fscore = cd, fs
        rows.append((cfg["shape"], rep))
    evaluation.write_metrics_csv(rows, out / f"metrics_{cfg['shape']}.csv")
    for shape, r in rows:
        print(f"{shape} {r.method}: ang {r.ang_deg:.4f} aa1 {r.aa1:.2f} aa2 {r.aa2:.2f}")


def cmd_spectrum(cfg, out):
    from . import evaluation

    oracle = _oracle(cfg)
    m = oracle.input_dim
    start = cfg["start"] or (-1.0,) + (0.1,) * (m - 1)
    end = cfg["end"] or (1.0,) + (0.1,) * (m - 1)
    ref = evaluation.spectrum_slice(oracle, start, end, cfg["n_fft"])
    cols = [ref]
    header = ["bin", "oracle"]
    if cfg["ckpt"]:
        cols.append(evaluation.spectrum_slice(_ckpt(cfg), start, end, cfg["n_fft"]))
        header.append("field")
    rows = [[i] + [repr(float(c[i])) for c in cols] for i in range(len(ref))]
    _write_csv(out / f"spectrum_{cfg['shape']}.csv", header, rows)
    for name, c in zip(header[1:], cols):
        print(f"{name}: top-quartile mass {evaluation.high_frequency_mass(c):.6e}")


def cmd_render(cfg, out):
    from .applications import render

    field = _ckpt(cfg)
    if field.input_dim != 3:
        raise ConfigError("render needs a 3D field")
    cam = render.Camera(fov_deg=cfg["fov"], resolution=(cfg["res"], cfg["res"]))
    op = _op(cfg, sigma_default=0.03)
    if cfg["mode"] == "normals":
        img = render.render_normals(field, cam, op)
    else:
        img = render.shade(field, cam, op, mode=cfg["mode"])
    path = render.write_ppm(img, out / f"render_{cfg['shape']}_{cfg['method']}_{cfg['mode']}.ppm")
    print(f"wrote {path}")


def cmd_collide(cfg, out):
    from .applications import collision

    field = _ckpt(cfg)
    op = _op(cfg, sigma_default=0.03)
    err = collision.run_collision_trials(field, _oracle(cfg), cfg["trials"], op, cfg["seed"])
    _write_csv(out / f"collide_{cfg['shape']}_{cfg['method']}.csv",
               ["method", "trials", "mean_error_deg"], [[op.tag, cfg["trials"], repr(err)]])
    print(f"mean rebound error {err:.6f} deg")


def cmd_advect(cfg, out):
    from .applications import advection

    pulse = advection.GaussianPulse()
    steps = cfg["steps"]
    if cfg["method"] == "grid":
        tl = advection.grid_advect_baseline(pulse, cfg["grid_res"], steps)
    else:
        op = _op(cfg, sigma_default=0.03)
        if op.method not in ("ad", "poly", "poly2", "fd", "gad", "sfd"):
            raise ConfigError(f"unknown method {op.method!r}")
        init = advection.fit_initial(pulse, seed=cfg["seed"])
        tl = advection.run_advection(pulse, op, steps,
                                     refit_cfg=advection.RefitConfig(seed=cfg["seed"]),
                                     initial=init, eval_res=cfg["grid_res"])
    tl.write_csv(out / f"advect_{cfg['method']}.csv")
    status = "crashed" if tl.crashed else "completed"
    print(f"{status} at t={tl.times[-1]:.2f}; last mse {tl.mse[-1]!r}")


def cmd_bench(cfg, out):
    from . import evaluation

    field = _ckpt(cfg)
    op = _op(cfg)
    r = evaluation.bench_operator(field, op, cfg["queries"], cfg["repeats"], cfg["seed"])
    _write_csv(out / f"bench_{cfg['method']}.csv", ["method", "mean_us", "std_us"],
               [[op.tag, repr(r["mean_us"]), repr(r["std_us"])]])
    print(f"{op.tag}: {r['mean_us']:.1f} +- {r['std_us']:.1f} us/query")


HANDLERS = {
    "train": cmd_train, "finetune": cmd_finetune, "query": cmd_query, "sweep": cmd_sweep,
    "eval": cmd_eval, "spectrum": cmd_spectrum, "render": cmd_render, "collide": cmd_collide,
    "advect": cmd_advect, "bench": cmd_bench,
}


def run(argv=None):
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        _threads()
        flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
        cfg = resolve(ns.command, flags, ns.config)
    except UsageError as exc:
        print(f"hnfd: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"hnfd: error: cannot read config: {exc}", file=sys.stderr)
        return 1
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, ns.command, out)
        HANDLERS[ns.command](cfg, out)
    except ConfigError as exc:
        print(f"hnfd: configuration error: {exc}", file=sys.stderr)
        return 1
    except (HNFDError, OSError) as exc:
        print(f"hnfd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
