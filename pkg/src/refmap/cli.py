"""Command-line driver: scene rendering, trajectory dumps, inversion, scoring,
and plot-data export.

Every subcommand is batch-in, files-out. Outputs carry no timestamps or
machine identifiers, so a fixed config and seed produce byte-identical trees
on any run. Settings resolve as flags > config file > defaults; the
``REFMAP_THREADS`` variable caps the per-object worker pool (numeric kernels
always run the same code path, so the cap never changes results).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import envmap as em
from . import sh
from .diffusion import SamplerConfig, forward_sample, save_trajectory
from .errors import ConfigError, RefmapError
from .metrics import (
    ScoreReport,
    fit_pca,
    format_metric,
    psnr,
    save_projection_csv,
    si_log_rmse,
    si_rmse,
    ssim,
)
from .render import lift_to_sphere, render_object, save_reflectance_map
from .scene import (
    PipelineConfig,
    Scene,
    default_dataset_spec,
    generate_dataset,
    load_scene,
    run_pipeline,
)

_METRIC_FUNCS = {
    "si_log_rmse": si_log_rmse,
    "si_rmse": si_rmse,
    "psnr": psnr,
    "ssim": ssim,
}
DEFAULT_METRICS = ("si_log_rmse", "si_rmse", "psnr", "ssim")
SUBCOMMANDS = ("render", "diffuse", "invert", "eval", "spectrum", "pca", "gen-dataset")
_METRIC_FIELD_HEIGHT = 32  # grid rows for SH metric fields in scoring


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Effective settings of one invocation.

    Defaults reproduce the reference operating point: 128x256 environment
    maps, 128x128 reflectance maps, K_max 150, sigma 0.1, delta 0.125, and
    degree-32 spherical harmonics for metric fields.
    """

    subcommand: str = ""
    scene: str = ""
    inputs: list[str] = field(default_factory=list)
    output: str = ""
    gt: str = ""
    env_height: int = 128
    map_size: int = 128
    cell_subdiv: int = 3
    metric_degree: int = 32
    metrics: list[str] = field(default_factory=lambda: list(DEFAULT_METRICS))
    seed: int = 0
    count: int = 0
    n_objects: int = 3
    objects: str = "multi"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def to_json(self) -> str:
        data = {
            "subcommand": self.subcommand,
            "scene": self.scene,
            "inputs": list(self.inputs),
            "output": self.output,
            "gt": self.gt,
            "env_height": self.env_height,
            "map_size": self.map_size,
            "cell_subdiv": self.cell_subdiv,
            "metric_degree": self.metric_degree,
            "metrics": list(self.metrics),
            "seed": self.seed,
            "count": self.count,
            "n_objects": self.n_objects,
            "objects": self.objects,
            "sampler": json.loads(self.sampler.to_json()),
        }
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {
            "subcommand", "scene", "inputs", "output", "gt", "env_height",
            "map_size", "cell_subdiv", "metric_degree", "metrics", "seed",
            "count", "n_objects", "objects", "sampler",
        }
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kwargs = {k: v for k, v in data.items() if k != "sampler"}
        cfg = cls(**kwargs)
        if "sampler" in data:
            cfg.sampler = SamplerConfig.from_dict(data["sampler"])
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.env_height < 2 or self.map_size < 4:
            raise ConfigError("resolutions out of range")
        if self.cell_subdiv < 1:
            raise ConfigError("cell_subdiv must be >= 1")
        if self.metric_degree < 0 or self.count < 0 or self.n_objects < 1:
            raise ConfigError("counts out of range")
        bad = [m for m in self.metrics if m not in _METRIC_FUNCS]
        if bad:
            raise ConfigError(f"unknown metrics {bad}; choose from {sorted(_METRIC_FUNCS)}")
        if self.objects != "multi":
            head, _, tail = self.objects.partition(":")
            if head != "single" or not tail.isdigit():
                raise ConfigError("--objects takes 'multi' or 'single:N'")


def _thread_cap() -> int:
    raw = os.environ.get("REFMAP_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"REFMAP_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise ConfigError("REFMAP_THREADS must be >= 1")
    return cap


def _parallel_map(fn, items):
    """Order-preserving map over a worker pool capped by REFMAP_THREADS."""
    items = list(items)
    cap = min(_thread_cap(), max(len(items), 1))
    if cap == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=cap) as pool:
        return list(pool.map(fn, items))


# sampler fields settable from the command line, flag dest -> attribute
_SAMPLER_FLAGS = {
    "samples": "n_samples",
    "degree": "degree",
    "sigma": "sigma",
    "delta": "delta",
    "k_max": "k_max",
    "steps_per_k": "steps_per_k",
    "sampler_grid": "env_height",
}
_TOP_FLAGS = (
    "scene", "inputs", "output", "gt", "env_height", "map_size", "cell_subdiv",
    "metric_degree", "metrics", "seed", "count", "n_objects", "objects",
)


def _effective_config(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "config", None):
        path = args.config
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        cfg = RunConfig.from_dict(data)
    else:
        cfg = RunConfig()
    flags = vars(args)
    for name in _TOP_FLAGS:
        value = flags.get(name)
        if value is not None:
            setattr(cfg, name, value)
    for dest, attr in _SAMPLER_FLAGS.items():
        value = flags.get(dest)
        if value is not None:
            setattr(cfg.sampler, attr, value)
    if flags.get("seed") is not None:
        cfg.sampler.seed = flags["seed"]
    cfg.subcommand = args.cmd
    cfg.validate()
    # round-trip through the parsers so command-line values obey the same
    # range checks as config files
    SamplerConfig.from_dict(json.loads(cfg.sampler.to_json()))
    return cfg


# ---------------------------------------------------------------------------
# shared helpers


def _require(cfg: RunConfig, **fields_needed: str) -> None:
    for attr, flag in fields_needed.items():
        if not getattr(cfg, attr):
            raise ConfigError(f"{flag} is required for {cfg.subcommand}")


def _load_scene_dir(path: str) -> Scene:
    if not os.path.isdir(path):
        raise ConfigError(f"scene directory not found: {path}")
    try:
        return load_scene(path)
    except (OSError, ValueError, KeyError) as e:
        raise ConfigError(f"bad scene manifest in {path}: {e}")


def _prepare_output(cfg: RunConfig) -> str:
    out = cfg.output
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        f.write(cfg.to_json())
    return out


def _write_rows_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _metric_field(coeffs: sh.ShCoefficients, height: int) -> np.ndarray:
    return np.clip(sh.reconstruct(coeffs, height, 2 * height), 0.0, None)


# ---------------------------------------------------------------------------
# subcommands


def cmd_render(cfg: RunConfig) -> None:
    """Render each object's image and its lifted reflectance map."""
    _require(cfg, scene="--scene", output="--output")
    scene = _load_scene_dir(cfg.scene)
    out = _prepare_output(cfg)

    def one(obj):
        image = render_object(obj.normal_map, obj.texture, obj.psi, scene.envmap)
        return image, lift_to_sphere(image, obj.normal_map, cfg.map_size)

    rendered = _parallel_map(one, scene.objects)
    for m, (image, raw) in enumerate(rendered):
        em.write_pfm(os.path.join(out, f"image_{m}.pfm"), image)
        save_reflectance_map(os.path.join(out, f"raw_{m}"), raw)


def cmd_diffuse(cfg: RunConfig) -> None:
    """Dump the forward noising trajectory of a scene as PFM slices."""
    _require(cfg, scene="--scene", output="--output")
    scene = _load_scene_dir(cfg.scene)
    out = _prepare_output(cfg)
    trajectory = forward_sample(
        scene.envmap,
        [obj.psi for obj in scene.objects],
        sigma=cfg.sampler.sigma,
        seed=cfg.seed,
        resolution=cfg.map_size,
        k_max=cfg.sampler.k_max,
    )
    save_trajectory(out, trajectory)


def _restrict_objects(scene: Scene, selector: str) -> Scene:
    if selector == "multi":
        return scene
    index = int(selector.partition(":")[2])
    if index >= len(scene.objects):
        raise ConfigError(
            f"--objects single:{index} but the scene has {len(scene.objects)} objects"
        )
    return Scene(
        objects=[scene.objects[index]], envmap=scene.envmap,
        seed=scene.seed, notes=scene.notes,
    )


def cmd_invert(cfg: RunConfig) -> None:
    """Sample illumination for a scene; score against a GT env when given."""
    _require(cfg, scene="--scene", output="--output")
    scene = _restrict_objects(_load_scene_dir(cfg.scene), cfg.objects)
    gt_env = None
    if cfg.gt:
        if not os.path.isfile(cfg.gt):
            raise ConfigError(f"GT environment map not found: {cfg.gt}")
        gt_env = em.load_hdr(cfg.gt)
    out = _prepare_output(cfg)

    pipeline_cfg = PipelineConfig(
        map_size=cfg.map_size,
        cell_subdiv=cfg.cell_subdiv,
        metric_degree=cfg.metric_degree,
        sampler=cfg.sampler,
    )
    result = run_pipeline(scene, pipeline_cfg)

    summary = {
        "config_hash": result.config_hash,
        "seed": result.seed,
        "channel_map": result.channel_map,
        "best_index": result.best_index,
        "psi_estimates": [
            {"metallic": p.metallic, "roughness": p.roughness, "specular": p.specular}
            for p in result.psi_estimates
        ],
    }
    with open(os.path.join(out, "result.json"), "w") as f:
        f.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    rows = []
    for i, sample in enumerate(result.samples):
        env_field = _metric_field(sample.coefficients, cfg.env_height)
        em.write_pfm(os.path.join(out, f"env_{i:02d}.pfm"), env_field)
        sh.save_coefficients_csv(
            os.path.join(out, f"sample_{i:02d}.csv"), sample.coefficients
        )
        rows.append([i, format_metric(sample.nll), int(sample.failed)])
    _write_rows_csv(os.path.join(out, "samples.csv"), ["sample", "nll", "failed"], rows)

    if gt_env is not None:
        # cap at what the GT grid resolves so coarse maps do not alias
        gt_degree = min(cfg.metric_degree, gt_env.height - 1)
        gt_field = np.clip(
            sh.reconstruct(sh.project(gt_env, gt_degree),
                           _METRIC_FIELD_HEIGHT, 2 * _METRIC_FIELD_HEIGHT),
            0.0, None,
        )
        report = ScoreReport(
            names=["nll", "si_log_rmse_env"],
            directions={"nll": "lower", "si_log_rmse_env": "lower"},
        )
        for sample in result.samples:
            field_i = _metric_field(sample.coefficients, _METRIC_FIELD_HEIGHT)
            report.add_sample({
                "nll": sample.nll,
                "si_log_rmse_env": si_log_rmse(field_i, gt_field),
            })
        report.save_csv(os.path.join(out, "scores.csv"))


def cmd_eval(cfg: RunConfig) -> None:
    """Score one map against a reference with the selected metrics."""
    _require(cfg, inputs="--input", gt="--gt", output="--output")
    for path in (cfg.inputs[0], cfg.gt):
        if not os.path.isfile(path):
            raise ConfigError(f"input not found: {path}")
    a = em.read_pfm(cfg.inputs[0])
    b = em.read_pfm(cfg.gt)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {a.shape} vs {b.shape}")
    rows = [[name, format_metric(_METRIC_FUNCS[name](a, b))] for name in cfg.metrics]
    os.makedirs(os.path.dirname(os.path.abspath(cfg.output)), exist_ok=True)
    _write_rows_csv(cfg.output, ["metric", "value"], rows)


def cmd_spectrum(cfg: RunConfig) -> None:
    """Per-band power of an environment map's SH projection."""
    _require(cfg, inputs="--input", output="--output")
    if not os.path.isfile(cfg.inputs[0]):
        raise ConfigError(f"input not found: {cfg.inputs[0]}")
    env = em.load_hdr(cfg.inputs[0])
    power = sh.band_power(sh.project(env, cfg.metric_degree))
    rows = [[l, format_metric(float(p))] for l, p in enumerate(power)]
    os.makedirs(os.path.dirname(os.path.abspath(cfg.output)), exist_ok=True)
    _write_rows_csv(cfg.output, ["l", "power"], rows)


def _load_sample_vectors(dirpath: str) -> list[np.ndarray]:
    """Sample vectors from a directory: coefficient CSVs, else raw PFMs."""
    if not os.path.isdir(dirpath):
        raise ConfigError(f"sample directory not found: {dirpath}")
    names = sorted(os.listdir(dirpath))
    csvs = [n for n in names if n.startswith("sample_") and n.endswith(".csv")]
    if csvs:
        return [
            sh.load_coefficients_csv(os.path.join(dirpath, n)).vector() for n in csvs
        ]
    pfms = [n for n in names if n.endswith(".pfm")]
    return [
        em.read_pfm(os.path.join(dirpath, n)).astype(np.float64).ravel() for n in pfms
    ]


def cmd_pca(cfg: RunConfig) -> None:
    """Project sample directories onto the top principal components."""
    _require(cfg, inputs="--input", output="--output")
    groups = {}
    for dirpath in cfg.inputs:
        vecs = _load_sample_vectors(dirpath)
        groups[dirpath] = vecs
    sizes = {v.size for vecs in groups.values() for v in vecs}
    if len(sizes) > 1:
        raise ConfigError(f"sample vectors disagree in size: {sorted(sizes)}")
    model = fit_pca([v for vecs in groups.values() for v in vecs])
    os.makedirs(os.path.dirname(os.path.abspath(cfg.output)), exist_ok=True)
    save_projection_csv(cfg.output, model, groups)


def cmd_gen_dataset(cfg: RunConfig) -> None:
    """Generate seeded scene manifests under the output directory."""
    _require(cfg, output="--output")
    spec = default_dataset_spec(
        n_scenes=cfg.count, n_objects=cfg.n_objects, seed=cfg.seed
    )
    _prepare_output(cfg)
    generate_dataset(cfg.output, spec, seed=cfg.seed)


_HANDLERS = {
    "render": cmd_render,
    "diffuse": cmd_diffuse,
    "invert": cmd_invert,
    "eval": cmd_eval,
    "spectrum": cmd_spectrum,
    "pca": cmd_pca,
    "gen-dataset": cmd_gen_dataset,
}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    # route argparse usage errors through the JSON error contract
    def error(self, message):
        raise ConfigError(message)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file; flags override it")
    sub.add_argument("--print-config", action="store_true",
                     help="dump the effective config and exit")
    sub.add_argument("--output", "-o", help="output directory or file")
    sub.add_argument("--seed", type=int, help="seed for all keyed randomness")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="refmap", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="cmd", required=True, metavar="subcommand",
                               parser_class=_Parser)

    p = subs.add_parser("render",
                        help="render scene images and lifted maps")
    _add_common(p)
    p.add_argument("--scene", help="scene manifest directory")
    p.add_argument("--resolution", type=int, dest="map_size",
                   help="reflectance map resolution")

    p = subs.add_parser("diffuse",
                        help="dump a forward noising trajectory")
    _add_common(p)
    p.add_argument("--scene", help="scene manifest directory")
    p.add_argument("--resolution", type=int, dest="map_size",
                   help="trajectory slice resolution")
    p.add_argument("--sigma", type=float, help="noise scale")
    p.add_argument("--k-max", type=int, dest="k_max", help="schedule budget")

    p = subs.add_parser("invert",
                        help="sample illumination for a scene")
    _add_common(p)
    p.add_argument("--scene", help="scene manifest directory")
    p.add_argument("--gt", help="GT environment map to score against")
    p.add_argument("--samples", type=int, help="number of chains")
    p.add_argument("--objects", help="'multi' (default) or 'single:N'")
    p.add_argument("--resolution", type=int, dest="map_size",
                   help="observation map resolution")
    p.add_argument("--cell-subdiv", type=int, dest="cell_subdiv",
                   help="sub-grid size modeling in-cell binning")
    p.add_argument("--env-height", type=int, dest="env_height",
                   help="rows of emitted environment maps")
    p.add_argument("--degree", type=int, help="SH degree of the sampler")
    p.add_argument("--sigma", type=float, help="likelihood noise scale")
    p.add_argument("--delta", type=float, help="chain jitter scale")
    p.add_argument("--k-max", type=int, dest="k_max", help="schedule budget")
    p.add_argument("--steps-per-k", type=int, dest="steps_per_k",
                   help="descent steps per schedule step")
    p.add_argument("--sampler-grid", type=int, dest="sampler_grid",
                   help="rows of the sampler's quadrature grid")

    p = subs.add_parser("eval",
                        help="score a map against a reference")
    _add_common(p)
    p.add_argument("--input", dest="inputs", action="append",
                   help="map to score")
    p.add_argument("--gt", help="reference map")
    p.add_argument("--metrics", nargs="+", help="metric names to compute")

    p = subs.add_parser("spectrum",
                        help="per-band SH power of an environment map")
    _add_common(p)
    p.add_argument("--input", dest="inputs", action="append",
                   help="environment map (PFM or RGBE)")
    p.add_argument("--degree", type=int, dest="metric_degree",
                   help="projection degree")

    p = subs.add_parser("pca",
                        help="PCA projection of sample directories")
    _add_common(p)
    p.add_argument("--input", dest="inputs", action="append",
                   help="sample directory; repeat to tag distributions")

    p = subs.add_parser("gen-dataset",
                        help="generate seeded scene manifests")
    _add_common(p)
    p.add_argument("--count", type=int, help="number of scenes")
    p.add_argument("--n-objects", type=int, dest="n_objects",
                   help="objects per scene")

    return parser


def _emit_error(exc: Exception) -> None:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        _emit_error(exc)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = _effective_config(args)
        if args.print_config:
            sys.stdout.write(cfg.to_json())
            return 0
        _HANDLERS[cfg.subcommand](cfg)
        return 0
    except ConfigError as exc:
        _emit_error(exc)
        return 2
    except (RefmapError, OSError, ValueError) as exc:
        _emit_error(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
