"""Physically based testbench for multi-object reflectance-map rendering,
coordinate-scheduled forward diffusion over materials, and sampling-based
illumination recovery with ambiguity-aware scoring."""

__version__ = "0.1.0"

from .brdf import MIRROR, BrdfTable, ReflectanceParams, distance_to_mirror, eval_disney
from .diffusion import (
    ForwardTrajectory,
    IlluminationSample,
    JointLikelihood,
    SamplerConfig,
    Schedule,
    build_schedule,
    compute_K,
    estimate_reflectance,
    forward_sample,
    joint_nll,
    sample_illumination,
    schedule_psi,
)
from .envmap import EnvironmentMap, load_hdr, mirror_warp, save_hdr, save_pfm, tonemap_ldr
from .metrics import (
    PcaGaussianModel,
    ScoreReport,
    fit_pca,
    gaussian_score,
    optimal_log_scale,
    psnr,
    si_log_rmse,
    si_rmse,
    ssim,
)
from .render import (
    NormalMap,
    ReflectanceMap,
    lift_to_sphere,
    merge_raw_maps,
    render_irradiance_map,
    render_object,
    render_reflectance_map,
    sphere_normal_map,
)
from .scene import (
    DatasetSpec,
    PipelineConfig,
    PipelineResult,
    Scene,
    SceneObject,
    TextureEstimate,
    default_dataset_spec,
    estimate_texture,
    generate_dataset,
    load_scene,
    run_pipeline,
    sample_scene,
    save_scene,
)
from .sh import ShCoefficients, band_power, lambert_convolve, project, reconstruct

__all__ = [
    "MIRROR",
    "BrdfTable",
    "DatasetSpec",
    "EnvironmentMap",
    "ForwardTrajectory",
    "IlluminationSample",
    "JointLikelihood",
    "NormalMap",
    "PcaGaussianModel",
    "PipelineConfig",
    "PipelineResult",
    "ReflectanceMap",
    "ReflectanceParams",
    "SamplerConfig",
    "Scene",
    "SceneObject",
    "Schedule",
    "ScoreReport",
    "ShCoefficients",
    "TextureEstimate",
    "band_power",
    "build_schedule",
    "compute_K",
    "default_dataset_spec",
    "distance_to_mirror",
    "estimate_reflectance",
    "estimate_texture",
    "eval_disney",
    "fit_pca",
    "forward_sample",
    "gaussian_score",
    "generate_dataset",
    "joint_nll",
    "lambert_convolve",
    "lift_to_sphere",
    "load_hdr",
    "load_scene",
    "merge_raw_maps",
    "mirror_warp",
    "optimal_log_scale",
    "project",
    "psnr",
    "reconstruct",
    "render_irradiance_map",
    "render_object",
    "render_reflectance_map",
    "run_pipeline",
    "sample_illumination",
    "sample_scene",
    "save_hdr",
    "save_pfm",
    "save_scene",
    "schedule_psi",
    "si_log_rmse",
    "si_rmse",
    "sphere_normal_map",
    "ssim",
    "tonemap_ldr",
]
