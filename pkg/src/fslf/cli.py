"""Command-line driver: ``fslf synth | train-signature | segment | evaluate | export-slice``.

Every verb reads an optional flat ``key=value`` config file (``--config``);
explicit flags override it. Exit codes: 0 ok, 2 bad configuration,
3 bad data, 4 numerical failure. ``FSLF_THREADS`` caps the worker count.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import cnn_signature as cnn
from .errors import ConfigError, DataError, FslfError
from .metrics import report, write_reports
from .feature_bank import roi_mask
from .pipeline import FusionParams, segment, train_signature_net
from .volume import (Volume, as_array, generate_phantom, histogram_match, majority_vote, read_svol,
                     write_svol)

log = logging.getLogger("fslf")

MANIFEST = "manifest.json"
PARAM_FIELDS = {f.name: f.type for f in fields(FusionParams)}
SYNTH_DEFAULTS = {"n_atlases": 5, "n_structures": 2, "noise": 0.05, "deform": 1.5, "size": 48}


# --------------------------------------------------------------------------
# configuration

def read_config(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(key, value, kind):
    try:
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value


def merged_options(args: argparse.Namespace, allowed: dict) -> dict:
    """Defaults, then the config file, then flags that were given."""
    opts = {}
    if args.config:
        for key, value in read_config(args.config).items():
            if key not in allowed:
                raise ConfigError(f"unknown config key {key!r}")
            opts[key] = _coerce(key, value, allowed[key])
    for key in allowed:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def fusion_params(opts: dict) -> FusionParams:
    return FusionParams(**{k: v for k, v in opts.items() if k in PARAM_FIELDS})


def worker_count() -> int:
    """Worker cap from ``FSLF_THREADS`` (default: all cores)."""
    raw = os.environ.get("FSLF_THREADS")
    cores = os.cpu_count() or 1
    if raw is None or raw == "":
        return cores
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FSLF_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("FSLF_THREADS must be at least 1")
    return min(n, cores)


def _apply_threads(n: int) -> None:
    import warnings

    import numba
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # threading-layer probing is noisy
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# --------------------------------------------------------------------------
# manifest

def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed manifest ({exc})") from None
    root = path.parent
    resolve = lambda p: root / p  # noqa: E731
    atlases = [(resolve(a["image"]), resolve(a["labels"])) for a in data.get("atlases", [])]
    if not atlases:
        raise ConfigError(f"{path}: manifest lists no atlases")
    target = data.get("target") or {}
    return {
        "root": root,
        "atlases": atlases,
        "target_image": resolve(target["image"]) if "image" in target else None,
        "target_labels": resolve(target["labels"]) if "labels" in target else None,
        "structures": data.get("structures"),
    }


def _read(path, kind=None) -> Volume:
    if not Path(path).exists():
        raise ConfigError(f"missing input file: {path}")
    return read_svol(path, kind)


def _load_atlases(man):
    return [(_read(i, "intensity"), _read(l, "label")) for i, l in man["atlases"]]


def _structures(man, atlases, opts):
    if opts.get("structures"):
        return [int(s) for s in str(opts["structures"]).split(",") if s.strip()]
    if man["structures"]:
        return [int(s) for s in man["structures"]]
    found = set()
    for _, lab in atlases:
        found.update(int(v) for v in np.unique(as_array(lab)))
    return sorted(s for s in found if s > 0)


# --------------------------------------------------------------------------
# verbs

def cmd_synth(opts: dict) -> int:
    n_atlases = int(opts.get("n_atlases", SYNTH_DEFAULTS["n_atlases"]))
    n_structures = int(opts.get("n_structures", SYNTH_DEFAULTS["n_structures"]))
    if n_atlases < 1:
        raise ConfigError("n_atlases must be at least 1")
    if n_structures < 1:
        raise ConfigError("n_structures must be at least 1")
    size = int(opts.get("size", SYNTH_DEFAULTS["size"]))
    if size < 8:
        raise ConfigError("size must be at least 8")
    noise = float(opts.get("noise", SYNTH_DEFAULTS["noise"]))
    deform = float(opts.get("deform", SYNTH_DEFAULTS["deform"]))
    if noise < 0 or deform < 0:
        raise ConfigError("noise and deform must be non-negative")
    seed = int(opts.get("seed", 0))
    out = Path(opts.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)

    def make(name, image_seed):
        img, lab = generate_phantom(image_seed, n_structures, noise, deform, shape=(size,) * 3)
        write_svol(out / f"{name}_image.svol", img)
        write_svol(out / f"{name}_labels.svol", lab)
        return {"image": f"{name}_image.svol", "labels": f"{name}_labels.svol", "seed": image_seed}

    manifest = {
        "atlases": [make(f"atlas{i}", 1000 * seed + i) for i in range(n_atlases)],
        "target": make("target", 1000 * seed + 999),
        "structures": list(range(1, n_structures + 1)),
        "shape": [size] * 3,
        "noise": noise,
        "deform": deform,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    log.info("wrote %d atlases and a target to %s", n_atlases, out)
    return 0


def _matched_atlases(man, atlases, params):
    if man["target_image"] is None:
        return atlases
    target = _read(man["target_image"], "intensity")
    return [(histogram_match(img, target, params.n_quantiles), lab) for img, lab in atlases]


def cmd_train_signature(opts: dict) -> int:
    man = load_manifest(opts.get("manifest") or ".")
    params = fusion_params(opts)
    atlases = _load_atlases(man)
    atlases = _matched_atlases(man, atlases, params)
    out = Path(opts.get("nets") or man["root"] / "nets")
    out.mkdir(parents=True, exist_ok=True)
    init = majority_vote([lab for _, lab in atlases])
    summary = {}
    for s in _structures(man, atlases, opts):
        net, losses, acc = train_signature_net(atlases, s, roi_mask(init, s, params.roi_radius),
                                               params)
        cnn.save_net(out / f"structure{s}.snet", net)
        with open(out / f"structure{s}_loss.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss"])
            writer.writerows((i + 1, f"{v:.10g}") for i, v in enumerate(losses))
        log.info("structure %d: final train accuracy %.4f", s, acc)
        summary[str(s)] = {"accuracy": acc, "final_loss": float(losses[-1])}
    (out / "training.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def _load_nets(path: Path, structures):
    nets = {}
    for s in structures:
        f = path / f"structure{s}.snet"
        if not f.exists():
            raise ConfigError(f"missing signature checkpoint {f}; run train-signature first")
        nets[s] = cnn.load_net(f)
    return nets


def largest_remainder_rgb(alpha, total: int = 255) -> np.ndarray:
    """Integer RGB triples summing exactly to ``total`` from simplex rows."""
    alpha = np.clip(np.atleast_2d(np.asarray(alpha, dtype=np.float64)), 0.0, None)
    alpha = alpha / alpha.sum(axis=1, keepdims=True)
    scaled = alpha * total
    base = np.floor(scaled).astype(np.int64)
    short = total - base.sum(axis=1)
    order = np.argsort(-(scaled - base), axis=1, kind="stable")
    for row in range(base.shape[0]):
        base[row, order[row, :short[row]]] += 1
    return base


def write_pnm(path, image: np.ndarray) -> None:
    """Plain-text PGM (2D array) or PPM (H x W x 3) with maxval 255."""
    image = np.asarray(image)
    rgb = image.ndim == 3
    h, w = image.shape[:2]
    rows = image.reshape(h, -1).astype(np.int64)
    with open(path, "w") as fh:
        fh.write(f"{'P3' if rgb else 'P2'}\n{w} {h}\n255\n")
        for r in rows:
            fh.write(" ".join(map(str, r)) + "\n")


def read_pnm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens += line.split("#", 1)[0].split()
    magic, w, h, _ = tokens[:4]
    vals = np.array(tokens[4:], dtype=np.int64)
    return vals.reshape(int(h), int(w), 3) if magic == "P3" else vals.reshape(int(h), int(w))


def _gray(slice_2d) -> np.ndarray:
    s = np.asarray(slice_2d, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    if hi <= lo:
        return np.zeros(s.shape, dtype=np.int64)
    return np.rint(255 * (s - lo) / (hi - lo)).astype(np.int64)


def _slice(vol: np.ndarray, axis: int, index: int) -> np.ndarray:
    if not 0 <= axis < 3:
        raise ConfigError("axis must be 0, 1 or 2")
    if not 0 <= index < vol.shape[axis]:
        raise ConfigError(f"slice index {index} outside 0..{vol.shape[axis] - 1}")
    # rows follow the second in-plane axis so the image reads like a raster slice
    return np.take(vol, index, axis=axis).T


def coefficient_slice(background, alpha_rows, axis: int, index: int) -> np.ndarray:
    """Gray slice with candidate voxels colored by their coefficients."""
    vol = as_array(background)
    gray = _gray(_slice(vol, axis, index))
    rgb = np.repeat(gray[..., None], 3, axis=2)
    for vox, a in alpha_rows:
        if vox[axis] != index or not np.all(np.isfinite(a)):
            continue
        u, v = [vox[d] for d in range(3) if d != axis]
        rgb[v, u] = largest_remainder_rgb(a)[0]
    return rgb


def _write_alpha_csv(path, structure_result):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z", "alpha_intensity", "alpha_gradient", "alpha_signature"])
        for vox, a in sorted(structure_result.alpha.items()):
            writer.writerow([*vox, *(f"{v:.10g}" for v in a)])


def read_alpha_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            vox = (int(rec["x"]), int(rec["y"]), int(rec["z"]))
            rows.append((vox, np.array([float(rec["alpha_intensity"]), float(rec["alpha_gradient"]),
                                        float(rec["alpha_signature"])])))
    return rows


def cmd_segment(opts: dict) -> int:
    man = load_manifest(opts.get("manifest") or ".")
    params = fusion_params(opts)
    if man["target_image"] is None:
        raise ConfigError("manifest has no target image")
    target = _read(man["target_image"], "intensity")
    atlases = _load_atlases(man)
    structures = _structures(man, atlases, opts)
    nets = _load_nets(Path(opts.get("nets") or man["root"] / "nets"), structures)
    out = Path(opts.get("out") or man["root"] / "segmentation")
    out.mkdir(parents=True, exist_ok=True)

    truth = _read(man["target_labels"], "label") if man["target_labels"] is not None else None
    res = segment(target, atlases, structures, params, nets=nets, truth=truth)
    write_svol(out / "final.svol", res.labels)
    write_svol(out / "initial.svol", res.initial)
    for it, m in enumerate(res.maps, 1):
        write_svol(out / f"iteration{it}.svol", m)
    status = {}
    for s, r in res.structures.items():
        _write_alpha_csv(out / f"alpha_structure{s}.csv", r)
        status[str(s)] = {"status": r.status, "n_candidates": r.n_candidates}
        if r.status != "ok":
            log.warning("structure %d: %s seeding, initial map kept", s, r.status)
        if "slice" in opts and r.alpha:
            index = int(opts["slice"])
            rgb = coefficient_slice(target, list(r.alpha.items()), 2, index)
            write_pnm(out / f"coefficients_structure{s}_z{index}.ppm", rgb)
    (out / "status.json").write_text(json.dumps(status, indent=2) + "\n")
    if truth is not None:
        with open(out / "dice_trace.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["structure", "iteration", "dice"])
            for s, r in res.structures.items():
                writer.writerows((s, it, f"{d:.10g}") for it, d in enumerate(r.dice_trace))
    return 0


def cmd_evaluate(opts: dict) -> int:
    man = load_manifest(opts.get("manifest") or ".")
    if man["target_labels"] is None:
        raise ConfigError("manifest has no target labels")
    truth = _read(man["target_labels"], "label")
    pred_path = opts.get("prediction") or man["root"] / "segmentation" / "final.svol"
    pred = _read(pred_path, "label")
    if pred.dims != truth.dims:
        raise DataError(f"prediction {pred.dims} and truth {truth.dims} differ in shape")
    atlases = _load_atlases(man)
    mv = majority_vote([lab for _, lab in atlases])
    iteration = int(opts.get("iteration", 0))
    rows = []
    for s in _structures(man, atlases, opts):
        rows.append(report("fslf", s, iteration, pred, truth))
        rows.append(report("mv", s, 0, mv, truth))
    out = Path(opts.get("out") or man["root"] / "report.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_reports(out, rows)
    for r in rows:
        log.info("%s structure %d: dice %.4f hausdorff %.3f", r.method, r.structure, r.dice, r.hausdorff)
    return 0


def cmd_export_slice(opts: dict) -> int:
    if not opts.get("input"):
        raise ConfigError("--input is required")
    if "index" not in opts:
        raise ConfigError("--index is required")
    vol = _read(opts["input"])
    axis = int(opts.get("axis", 2))
    index = int(opts["index"])
    out = opts.get("out")
    if opts.get("alpha"):
        if not Path(opts["alpha"]).exists():
            raise ConfigError(f"missing input file: {opts['alpha']}")
        image = coefficient_slice(vol, read_alpha_csv(opts["alpha"]), axis, index)
        out = out or Path(opts["input"]).with_suffix(f".slice{index}.ppm")
    else:
        data = as_array(vol)
        s = _slice(data, axis, index)
        image = np.clip(s, 0, 255).astype(np.int64) if vol.kind == "label" else _gray(s)
        out = out or Path(opts["input"]).with_suffix(f".slice{index}.pgm")
    write_pnm(out, image)
    return 0


# --------------------------------------------------------------------------
# argument parsing

def _add_params(p):
    for name, kind in PARAM_FIELDS.items():
        t = int if kind in (int, "int") else float if kind in (float, "float") else str
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=t, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fslf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate phantom atlases and a target")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--n-atlases", dest="n_atlases", type=int)
    p.add_argument("--n-structures", dest="n_structures", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--deform", type=float)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)

    for verb, help_ in (("train-signature", "train one signature network per structure"),
                        ("segment", "fuse atlas labels onto the target")):
        p = sub.add_parser(verb, help=help_)
        p.add_argument("--config")
        p.add_argument("--manifest")
        p.add_argument("--nets")
        p.add_argument("--structures")
        if verb == "segment":
            p.add_argument("--out")
            p.add_argument("--slice", type=int, help="write a coefficient image of this axial slice")
        _add_params(p)

    p = sub.add_parser("evaluate", help="Dice and Hausdorff of a prediction and the MV baseline")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--prediction")
    p.add_argument("--out")
    p.add_argument("--structures")
    p.add_argument("--iteration", type=int)

    p = sub.add_parser("export-slice", help="write one slice as a PGM, or a PPM of coefficients")
    p.add_argument("--config")
    p.add_argument("--input")
    p.add_argument("--axis", type=int)
    p.add_argument("--index", type=int)
    p.add_argument("--alpha")
    p.add_argument("--out")
    return parser


_ALLOWED = {
    "synth": dict(out=str, n_atlases=int, n_structures=int, noise=float, deform=float,
                  size=int, seed=int),
    "train-signature": dict(manifest=str, nets=str, structures=str, **PARAM_FIELDS),
    "segment": dict(manifest=str, nets=str, out=str, structures=str, slice=int, **PARAM_FIELDS),
    "evaluate": dict(manifest=str, prediction=str, out=str, structures=str, iteration=int),
    "export-slice": dict(input=str, axis=int, index=int, alpha=str, out=str),
}
_COMMANDS = {
    "synth": cmd_synth,
    "train-signature": cmd_train_signature,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "export-slice": cmd_export_slice,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if os.environ.get("FSLF_THREADS"):
            _apply_threads(worker_count())
        opts = merged_options(args, _ALLOWED[args.verb])
        return _COMMANDS[args.verb](opts)
    except FslfError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
