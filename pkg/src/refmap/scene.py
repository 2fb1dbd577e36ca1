"""Scene assembly, dataset generation, texture recovery, and the pipeline.

A scene is a set of objects (normal map, per-pixel diffuse texture,
reflectance parameters) sharing one environment map. The generator samples
materials under fixed categorical rules, the texture solver inverts the
affine dependence of the shaded image on the diffuse albedo, and
``run_pipeline`` chains lift, reflectance estimation, illumination
sampling, and a texture re-solve into one reproducible bundle.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import envmap as em
from . import sh
from .brdf import ReflectanceParams
from .diffusion import SamplerConfig, estimate_reflectance, sample_illumination
from .errors import ConfigError, InsufficientDataError, UnsupportedMaterialError
from .metrics import ScoreReport, si_log_rmse
from .render import (
    NormalMap,
    ReflectanceMap,
    grid_footprint_sq,
    lift_to_sphere,
    render_object,
    save_reflectance_map,
    sphere_normal_map,
    weight_matrices,
)
from .rng import keyed_rng
from .sh import ShCoefficients, sh_basis

SHADING_FLOOR = 1e-4


# ---------------------------------------------------------------------------
# scene and dataset types


@dataclass
class SceneObject:
    """One object: geometry, per-pixel diffuse albedo, and material."""

    normal_map: NormalMap
    texture: np.ndarray  # (H, W, 3) in [0, 1]
    psi: ReflectanceParams

    def __post_init__(self):
        self.texture = np.asarray(self.texture, dtype=np.float64)
        if self.texture.shape != self.normal_map.normals.shape:
            raise ValueError(
                f"texture shape {self.texture.shape} must match the normal map "
                f"{self.normal_map.normals.shape}"
            )


@dataclass
class Scene:
    """Objects under one shared environment map, with the seed of record."""

    objects: list[SceneObject]
    envmap: em.EnvironmentMap
    seed: int
    notes: str = ""

    def __post_init__(self):
        if not self.objects:
            raise ValueError("a scene needs at least one object")

    @property
    def n_objects(self) -> int:
        return len(self.objects)


@dataclass
class DatasetSpec:
    """Asset pools and sampling rules for the scene generator.

    ``texture_mix`` is the probability of drawing an asset texture instead
    of a uniform random color when texture assets are present; the split
    between the two sources is unspecified upstream, so 0.5 is a documented
    default guess. Asset textures must match the normal-map grid.
    """

    n_scenes: int
    n_objects: int = 3
    normal_maps: list[tuple[str, NormalMap]] = field(default_factory=list)
    envmaps: list[tuple[str, em.EnvironmentMap]] = field(default_factory=list)
    textures: list[tuple[str, np.ndarray]] = field(default_factory=list)
    texture_mix: float = 0.5


def _checker_texture(size: int, cells: int = 6) -> np.ndarray:
    ij = np.add.outer(np.arange(size) * cells // size, np.arange(size) * cells // size)
    tone = np.where(ij % 2 == 0, 0.85, 0.25)
    tex = np.stack([tone, tone, np.full_like(tone, 0.55)], axis=-1)
    return tex.astype(np.float64)


def _gradient_texture(size: int) -> np.ndarray:
    ramp = np.linspace(0.15, 0.9, size)
    r = np.broadcast_to(ramp[:, None], (size, size))
    g = np.broadcast_to(ramp[None, :], (size, size))
    b = np.full((size, size), 0.5)
    return np.stack([r, g, b], axis=-1)


def default_dataset_spec(
    n_scenes: int,
    n_objects: int = 3,
    map_size: int = 48,
    n_envs: int = 8,
    env_degree: int = 4,
    env_height: int = 16,
    seed: int = 0,
) -> DatasetSpec:
    """Procedural asset pools: one sphere geometry, band-limited skies."""
    normal_maps = [(f"sphere{map_size}", sphere_normal_map(map_size))]
    envmaps = []
    for e in range(n_envs):
        rng = keyed_rng(seed, 9, e)
        coeffs = rng.normal(size=(3, (env_degree + 1) ** 2))
        coeffs[:, 0] = 4.0 * env_degree + 4.0
        radiance = sh.reconstruct(ShCoefficients(env_degree, coeffs), env_height, 2 * env_height)
        envmaps.append((f"sky{e}", em.EnvironmentMap(np.clip(radiance, 0.0, None))))
    textures = [
        ("checker", _checker_texture(map_size)),
        ("gradient", _gradient_texture(map_size)),
    ]
    return DatasetSpec(
        n_scenes=n_scenes,
        n_objects=n_objects,
        normal_maps=normal_maps,
        envmaps=envmaps,
        textures=textures,
    )


def sample_scene(rng_seed: int, assets: DatasetSpec) -> Scene:
    """Draw one scene from the asset pools under the material rules.

    Metallic is categorical {0, 1}. Roughness starts uniform on [0, 1] and
    with probability 0.5 is resampled uniform on [0.4, 1]; specular is
    uniform on [0, 1]. Draw order is fixed, so a seed pins the scene.
    """
    if not assets.normal_maps:
        raise ConfigError("dataset spec has no normal-map assets")
    if not assets.envmaps:
        raise ConfigError("dataset spec has no environment-map assets")
    rng = keyed_rng(rng_seed, 7)
    env_name, envmap = assets.envmaps[int(rng.integers(len(assets.envmaps)))]
    objects = []
    for _ in range(assets.n_objects):
        name, normal_map = assets.normal_maps[int(rng.integers(len(assets.normal_maps)))]
        metallic = float(rng.integers(2))
        roughness = float(rng.uniform(0.0, 1.0))
        if rng.uniform() < 0.5:
            roughness = float(rng.uniform(0.4, 1.0))
        specular = float(rng.uniform(0.0, 1.0))
        psi = ReflectanceParams(metallic, roughness, specular)
        shape = normal_map.normals.shape
        if assets.textures and rng.uniform() < assets.texture_mix:
            _, tex = assets.textures[int(rng.integers(len(assets.textures)))]
            if tex.shape != shape:
                raise ConfigError(
                    f"texture asset shape {tex.shape} does not match normal map {shape}"
                )
            texture = np.array(tex, dtype=np.float64)
        else:
            color = rng.uniform(0.0, 1.0, size=3)
            texture = np.broadcast_to(color, shape).copy()
        objects.append(SceneObject(normal_map=normal_map, texture=texture, psi=psi))
    return Scene(objects=objects, envmap=envmap, seed=rng_seed, notes=f"env={env_name}")


# ---------------------------------------------------------------------------
# texture recovery


@dataclass
class TextureEstimate:
    """Recovered per-pixel diffuse albedo with a validity mask."""

    values: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) bool


def estimate_texture(
    image: np.ndarray,
    normals: NormalMap,
    env: ShCoefficients,
    psi: ReflectanceParams,
    env_height: int = 24,
    diffuse_model: str = "burley",
) -> TextureEstimate:
    """Invert the shaded image for the diffuse albedo, pixel by pixel.

    For dielectrics the specular lobe is albedo-free, so the image is
    affine in the texture: subtract the white-albedo specular term and
    divide by the white-albedo diffuse shading. Pixels whose shading falls
    below ``SHADING_FLOOR`` in any channel are masked out instead of
    amplifying noise. Metals tint the specular lobe with the albedo, which
    has no closed-form inverse here.
    """
    if psi.metallic != 0.0:
        raise UnsupportedMaterialError(
            f"texture recovery requires a dielectric (metallic=0), got {psi.metallic}"
        )
    image = np.asarray(image, dtype=np.float64)
    if image.shape != normals.normals.shape:
        raise ValueError(f"image shape {image.shape} does not match the normal map")
    fg = normals.mask
    if not fg.any():
        raise InsufficientDataError("normal map has an empty foreground")

    h, w = env_height, 2 * env_height
    dirs = em.grid_directions(h, w).reshape(-1, 3)
    omega = em.solid_angles(h, w).reshape(-1)
    theta, phi = em.directions_to_angles(dirs)
    radiance = np.clip(env.coeffs @ sh_basis(env.degree, theta, phi).T, 0.0, None)  # (3, D)

    a_w, c_w = weight_matrices(
        psi, normals.normals[fg], dirs, omega, diffuse_model, grid_footprint_sq(h)
    )
    shading = a_w @ radiance.T  # (P, 3) diffuse response to a white albedo
    spec = c_w @ radiance.T
    ok = shading.min(axis=1) >= SHADING_FLOOR
    tex_fg = np.zeros_like(shading)
    tex_fg[ok] = np.clip((image[fg][ok] - spec[ok]) / shading[ok], 0.0, 1.0)

    values = np.zeros_like(image)
    values[fg] = tex_fg
    mask = np.zeros(fg.shape, dtype=bool)
    mask[fg] = ok
    return TextureEstimate(values=values, mask=mask)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineConfig:
    """End-to-end run knobs; hashable for artifact stamping.

    ``n_channels`` is the minimum number of sampler input channels; scenes
    with fewer objects are duplicated cyclically to fill the remainder.
    ``cell_subdiv`` averages inverse-model predictions over a sub-grid of
    each map cell; it matches the binning exactly when normal maps are
    ``cell_subdiv`` times the map resolution, and approximates it otherwise.
    """

    map_size: int = 24
    n_channels: int = 3
    cell_subdiv: int = 3
    texture_env_height: int = 24
    metric_degree: int = 32
    metric_height: int = 32
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def to_json(self) -> str:
        data = {
            "map_size": self.map_size,
            "n_channels": self.n_channels,
            "cell_subdiv": self.cell_subdiv,
            "texture_env_height": self.texture_env_height,
            "metric_degree": self.metric_degree,
            "metric_height": self.metric_height,
            "sampler": json.loads(self.sampler.to_json()),
        }
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {"map_size", "n_channels", "cell_subdiv", "texture_env_height",
                 "metric_degree", "metric_height", "sampler"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown pipeline config keys {sorted(unknown)}")
        kwargs = {k: v for k, v in data.items() if k != "sampler"}
        cfg = cls(**kwargs)
        if "sampler" in data:
            cfg.sampler = SamplerConfig.from_dict(data["sampler"])
        if (cfg.map_size < 4 or cfg.n_channels < 1 or cfg.metric_height < 2
                or cfg.cell_subdiv < 1):
            raise ConfigError("pipeline config out of range")
        return cfg


@dataclass
class PipelineResult:
    """Everything one pipeline run produced, stamped for reproducibility."""

    seed: int
    config_hash: str
    channel_map: list[int]
    raw_maps: list[ReflectanceMap]
    psi_estimates: list[ReflectanceParams]
    samples: list
    best_index: int
    textures: list[TextureEstimate | None]
    report: ScoreReport
    notes: str = ""

    def save(self, dirpath: str | os.PathLike) -> None:
        dirpath = os.fspath(dirpath)
        os.makedirs(dirpath, exist_ok=True)
        summary = {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "channel_map": self.channel_map,
            "best_index": self.best_index,
            "psi_estimates": [
                {"metallic": p.metallic, "roughness": p.roughness, "specular": p.specular}
                for p in self.psi_estimates
            ],
            "samples": [
                {"chain": s.chain, "nll": s.nll, "failed": s.failed} for s in self.samples
            ],
            "notes": self.notes,
        }
        with open(os.path.join(dirpath, "result.json"), "w") as f:
            f.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        self.report.save_csv(os.path.join(dirpath, "scores.csv"))
        for m, rmap in enumerate(self.raw_maps):
            save_reflectance_map(os.path.join(dirpath, f"raw_{m}"), rmap)
        for i, sample in enumerate(self.samples):
            sh.save_coefficients_csv(
                os.path.join(dirpath, f"sample_{i:02d}.csv"), sample.coefficients
            )
        for m, tex in enumerate(self.textures):
            if tex is not None:
                em.write_pfm(os.path.join(dirpath, f"texture_{m}.pfm"), tex.values)
                em.write_png(os.path.join(dirpath, f"texture_{m}_mask.png"), tex.mask)


def _env_metric_field(env_like, degree: int, height: int) -> np.ndarray:
    """Clamped radiance of an env map or SH candidate on the metric grid.

    Environment maps are projected at the requested degree capped at their
    row count minus one, so coarse grids do not alias into the metric.
    """
    if isinstance(env_like, ShCoefficients):
        coeffs = env_like
    else:
        coeffs = sh.project(env_like, min(degree, env_like.height - 1))
    return np.clip(sh.reconstruct(coeffs, height, 2 * height), 0.0, None)


def run_pipeline(scene: Scene, config: PipelineConfig | None = None) -> PipelineResult:
    """Lift, estimate materials, sample illumination, re-solve textures.

    Inversion assumes white albedo; textured scenes fold their albedo into
    the recovered illumination, and the final texture re-solve is relative
    to that estimate. Dielectric objects get a texture estimate under the
    best sample; metals are reported without one.
    """
    config = config or PipelineConfig()
    images = [
        render_object(obj.normal_map, obj.texture, obj.psi, scene.envmap)
        for obj in scene.objects
    ]
    raw_maps = [
        lift_to_sphere(image, obj.normal_map, config.map_size)
        for image, obj in zip(images, scene.objects)
    ]
    psi_estimates = [
        estimate_reflectance(
            rmap, env_guess=None, env_height=config.sampler.env_height,
            cell_subdiv=config.cell_subdiv,
        )
        for rmap in raw_maps
    ]

    m = len(raw_maps)
    width = max(m, config.n_channels)
    channel_map = [i % m for i in range(width)]
    samples = sample_illumination(
        [raw_maps[i] for i in channel_map],
        [psi_estimates[i] for i in channel_map],
        config=config.sampler,
        cell_subdiv=config.cell_subdiv,
    )
    ranked = sorted(range(len(samples)), key=lambda i: (samples[i].failed, samples[i].nll))
    best_index = ranked[0]
    best = samples[best_index]

    textures: list[TextureEstimate | None] = []
    for obj, psi_est, image in zip(scene.objects, psi_estimates, images):
        if psi_est.metallic == 0.0:
            textures.append(
                estimate_texture(
                    image, obj.normal_map, best.coefficients, psi_est,
                    env_height=config.texture_env_height,
                )
            )
        else:
            textures.append(None)

    gt_field = _env_metric_field(scene.envmap, config.metric_degree, config.metric_height)
    report = ScoreReport(
        names=["nll", "si_log_rmse_env"],
        directions={"nll": "lower", "si_log_rmse_env": "lower"},
    )
    for sample in samples:
        sample_field = _env_metric_field(
            sample.coefficients, config.metric_degree, config.metric_height
        )
        report.add_sample({
            "nll": sample.nll,
            "si_log_rmse_env": si_log_rmse(sample_field, gt_field),
        })

    return PipelineResult(
        seed=scene.seed,
        config_hash=config.config_hash,
        channel_map=channel_map,
        raw_maps=raw_maps,
        psi_estimates=psi_estimates,
        samples=samples,
        best_index=best_index,
        textures=textures,
        report=report,
        notes="white-albedo inversion; textures re-solved under the best sample",
    )


# ---------------------------------------------------------------------------
# manifests and dataset generation


def save_scene(dirpath: str | os.PathLike, scene: Scene) -> None:
    """Write ``manifest.json`` plus PFM assets into one directory."""
    from .render import save_normal_map

    dirpath = os.fspath(dirpath)
    os.makedirs(dirpath, exist_ok=True)
    objects = []
    for i, obj in enumerate(scene.objects):
        normal_name = f"normal_{i}.pfm"
        texture_name = f"texture_{i}.pfm"
        save_normal_map(os.path.join(dirpath, normal_name), obj.normal_map)
        em.write_pfm(os.path.join(dirpath, texture_name), obj.texture)
        objects.append({
            "normal_map": normal_name,
            "texture": texture_name,
            "psi": {
                "metallic": obj.psi.metallic,
                "roughness": obj.psi.roughness,
                "specular": obj.psi.specular,
            },
        })
    em.write_pfm(os.path.join(dirpath, "envmap.pfm"), scene.envmap.data)
    manifest = {
        "seed": scene.seed,
        "objects": objects,
        "envmap": "envmap.pfm",
        "notes": scene.notes,
    }
    with open(os.path.join(dirpath, "manifest.json"), "w") as f:
        f.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_scene(dirpath: str | os.PathLike) -> Scene:
    """Read a manifest directory back; values carry PFM float32 precision."""
    from .render import load_normal_map

    dirpath = os.fspath(dirpath)
    with open(os.path.join(dirpath, "manifest.json")) as f:
        manifest = json.load(f)
    objects = []
    for entry in manifest["objects"]:
        normal_map = load_normal_map(os.path.join(dirpath, entry["normal_map"]))
        texture = np.asarray(
            em.read_pfm(os.path.join(dirpath, entry["texture"])), dtype=np.float64
        )
        psi = ReflectanceParams(**entry["psi"])
        objects.append(SceneObject(normal_map=normal_map, texture=texture, psi=psi))
    envmap = em.EnvironmentMap(
        np.asarray(em.read_pfm(os.path.join(dirpath, "envmap.pfm")), dtype=np.float64)
    )
    return Scene(
        objects=objects,
        envmap=envmap,
        seed=int(manifest["seed"]),
        notes=manifest.get("notes", ""),
    )


def generate_dataset(
    out_dir: str | os.PathLike, spec: DatasetSpec, seed: int = 0
) -> list[str]:
    """Emit ``scenes/scene_{i:04d}/`` manifest directories; returns paths.

    Scene ``i`` uses rng seed ``seed + i`` and records it in its manifest,
    so any scene regenerates in isolation.
    """
    out_dir = os.fspath(out_dir)
    scenes_dir = os.path.join(out_dir, "scenes")
    os.makedirs(scenes_dir, exist_ok=True)
    paths = []
    for i in range(spec.n_scenes):
        scene = sample_scene(seed + i, spec)
        scene_dir = os.path.join(scenes_dir, f"scene_{i:04d}")
        save_scene(scene_dir, scene)
        paths.append(scene_dir)
    return paths
