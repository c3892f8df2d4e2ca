"""Run configuration: one flat key=value file mapped onto the per-module configs.

Grammar, one entry per line:

    # comment (also allowed after a value)
    key = value

Keys are the field names of PipelineConfig below. Unknown keys are rejected so
a typo cannot silently fall back to a default.
"""

from dataclasses import dataclass, fields
from pathlib import Path

from .features import VALID_LATENT_DIMS
from .losses import LossWeights
from .mapping import MaintenanceConfig, OptimConfig
from .rasterizer import RenderConfig
from .tracking import TrackConfig


class ConfigError(ValueError):
    pass


_FEATURE_SOURCES = ("files", "synthetic", "none")


@dataclass
class PipelineConfig:
    # dataset / artifacts
    dataset: str = "synthetic"        # "synthetic" or a TUM-layout directory
    output_dir: str = "out"
    feature_source: str = "synthetic"  # files | synthetic | none
    feature_dir: str = ""              # FSTF triples, used when feature_source=files
    seed: int = 0
    frames: int = 200
    max_frames: int = 0                # cap for directory datasets, 0 = all
    width: int = 160
    height: int = 120
    scene_gaussians: int = 5000
    scene_classes: int = 6
    traj_span_deg: float = 360.0       # synthetic circle arc; 360 = full loop

    # latent codec
    latent_dim: int = 24
    pretrain_steps: int = 2500
    pretrain_batch: int = 512
    pretrain_lr: float = 2e-3
    corpus_frames: int = 24            # frames sampled evenly for the pretrain corpus
    corpus_per_frame: int = 192
    adapt_lr: float = 1e-3
    adapt_batch: int = 256

    # tracking
    gamma: float = 10.0
    track_max_iter: int = 30
    max_corr_dist: float = 0.5
    min_inliers: int = 6
    track_knn: int = 20
    track_voxel: float = 0.025
    source_stride: int = 2
    tau_t: float = 0.05
    tau_r_deg: float = 3.0
    tau_sigma: float = 0.05
    mapping_stride: int = 3

    # mapping loss weights
    lambda1: float = 0.8
    lambda2: float = 0.2
    lambda_f: float = 1.0
    lambda_d: float = 0.5
    lambda_pcc: float = 0.05
    lambda_n: float = 0.05
    lambda0: float = 1e-4
    lambda_max: float = 1e-2
    ramp_t: float = 1000.0
    lambda_thin: float = 1e-2

    # map maintenance
    insert_stride: int = 6
    spacing_knn: int = 3
    prune_track_pct: float = 10.0
    prune_map_pct: float = 30.0
    protect_rounds: int = 1
    max_size_frac: float = 0.10
    min_opacity: float = 0.005
    score_lambda_color: float = 1.0
    score_lambda_feature: float = 1.0
    score_window: int = 4
    opt_window: int = 8
    opt_steps: int = 10
    densify_grad_frac: float = 2e-4
    densify_size_frac: float = 0.01
    refine_clamp_lo: float = 0.1
    refine_clamp_hi: float = 3.0

    # pipeline
    refine: bool = False
    refine_iterations: int = 1000
    metrics_every: int = 5
    threads: int = 1
    scene_extent: float = 0.0          # 0 = derive from the first frame's depth

    def validate(self) -> "PipelineConfig":
        if self.feature_source not in _FEATURE_SOURCES:
            raise ConfigError(f"feature_source must be one of {_FEATURE_SOURCES}")
        if self.latent_dim not in VALID_LATENT_DIMS:
            raise ConfigError(f"latent_dim must be one of {sorted(VALID_LATENT_DIMS)}")
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        if self.width < 16 or self.height < 16:
            raise ConfigError("image size must be at least 16x16")
        for name in ("insert_stride", "source_stride", "mapping_stride",
                     "metrics_every", "opt_steps", "opt_window", "score_window",
                     "pretrain_batch", "adapt_batch", "corpus_frames",
                     "corpus_per_frame", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("prune_track_pct", "prune_map_pct"):
            v = getattr(self, name)
            if not 0 <= v <= 100:
                raise ConfigError(f"{name} must lie in [0, 100]")
        for name in ("tau_t", "tau_r_deg", "tau_sigma", "max_corr_dist",
                     "track_voxel"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.refine_iterations < 0:
            raise ConfigError("refine_iterations must be >= 0")
        if not 0 < self.traj_span_deg <= 360:
            raise ConfigError("traj_span_deg must lie in (0, 360]")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.scene_extent < 0:
            raise ConfigError("scene_extent must be >= 0")
        self.loss_weights()  # range checks live in LossWeights.validate
        return self

    # views onto the per-module config types

    def track_config(self) -> TrackConfig:
        return TrackConfig(
            gamma=self.gamma, max_iter=self.track_max_iter,
            max_corr_dist=self.max_corr_dist, min_inliers=self.min_inliers,
            knn=self.track_knn, voxel=self.track_voxel,
            source_stride=self.source_stride, tau_t=self.tau_t,
            tau_r_deg=self.tau_r_deg, tau_sigma=self.tau_sigma,
            mapping_stride=self.mapping_stride)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda1=self.lambda1, lambda2=self.lambda2, lambda_f=self.lambda_f,
            lambda_d=self.lambda_d, lambda_pcc=self.lambda_pcc,
            lambda_n=self.lambda_n, lambda0=self.lambda0,
            lambda_max=self.lambda_max, ramp_t=self.ramp_t,
            lambda_thin=self.lambda_thin).validate()

    def maintenance_config(self) -> MaintenanceConfig:
        return MaintenanceConfig(
            insert_stride=self.insert_stride, spacing_knn=self.spacing_knn,
            prune_track_pct=self.prune_track_pct,
            prune_map_pct=self.prune_map_pct, protect_rounds=self.protect_rounds,
            max_size_frac=self.max_size_frac, min_opacity=self.min_opacity,
            lambda_c=self.score_lambda_color, lambda_f=self.score_lambda_feature,
            score_window=self.score_window, opt_window=self.opt_window,
            opt_steps=self.opt_steps, densify_grad_frac=self.densify_grad_frac,
            densify_size_frac=self.densify_size_frac,
            refine_clamp_lo=self.refine_clamp_lo,
            refine_clamp_hi=self.refine_clamp_hi)

    def render_config(self, threads: int = 0) -> RenderConfig:
        return RenderConfig(threads=threads or self.threads)

    def optim_config(self) -> OptimConfig:
        return OptimConfig()


_COERCE = {
    int: lambda s: int(s, 10),
    float: float,
    str: lambda s: s,
    bool: lambda s: {"true": True, "1": True, "yes": True,
                     "false": False, "0": False, "no": False}[s.lower()],
}


def parse_config(text: str) -> PipelineConfig:
    cfg = PipelineConfig()
    by_name = {f.name: f for f in fields(PipelineConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in by_name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        ftype = by_name[key].type
        try:
            setattr(cfg, key, _COERCE[ftype](value))
        except (ValueError, KeyError):
            raise ConfigError(
                f"line {lineno}: cannot parse {value!r} as {ftype.__name__} for {key!r}")
    return cfg.validate()


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: PipelineConfig) -> str:
    """Text form that parse_config reads back to an equal config."""
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(PipelineConfig)]
    return "\n".join(lines) + "\n"
