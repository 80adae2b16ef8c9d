"""Engine configuration: one flat dataclass covering every pipeline
threshold, loadable from a plain `key = value` text file."""

import math
from dataclasses import dataclass, fields

from .errors import MissingFile


@dataclass
class EngineConfig:
    # keyframe triggering
    eps_motion: float = 20.0  # px of accumulated mean match displacement
    kf_max_interval: int = 30  # frames; keyframe forced at this spacing
    n_min: int = 1000  # depth hypotheses required at initialization

    # feature front-end
    detect_threshold: float = 0.02
    nms_radius: int = 5
    window_du: float = 200.0
    window_dv: float = 100.0
    eps_epi: float = 2.0
    ransac_seed: int = 0
    ransac_iters: int = 200
    inlier_px: float = 1.5
    min_inliers: int = 6

    # stereo depth
    g_min: float = 0.02
    disp_min: int = 0
    disp_max: int = 128
    sad_window: int = 15
    lr_tolerance: float = 1.0
    fuse_lambda: float = 2.0
    radial_alpha: float = 1.0

    # direct alignment
    huber_photo: float = 0.03
    huber_depth: float = 0.05
    sigma_i: float = 0.02
    rho_min: float = 0.3
    tau_track: float = 0.45

    # pose graph
    n_candidates: int = 5
    rho_c: float = 10.0
    theta_c_deg: float = 45.0
    delta_t: float = 0.1
    delta_r: float = 0.05
    loop_info_scale: float = 0.5

    # threading
    single_thread: bool = True

    def __post_init__(self):
        if self.eps_motion <= 0:
            raise ValueError("eps_motion must be positive")

    @property
    def theta_c(self):
        return math.radians(self.theta_c_deg)


def load_config(path) -> EngineConfig:
    """Parse a flat `key = value` file; '#' starts a comment. Unknown keys
    are rejected so typos fail loudly."""
    types = {f.name: f.type for f in fields(EngineConfig)}
    values = {}
    try:
        text = open(path).read()
    except OSError as err:
        raise MissingFile(str(err)) from err
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        kind = types[key]
        if kind == "bool" or kind is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(f"{path}:{lineno}: {key} expects true/false")
            values[key] = raw.lower() == "true"
        elif kind == "int" or kind is int:
            values[key] = int(raw)
        else:
            values[key] = float(raw)
    return EngineConfig(**values)


def save_config(config: EngineConfig, path):
    with open(path, "w") as fh:
        for f in fields(EngineConfig):
            fh.write(f"{f.name} = {getattr(config, f.name)}\n")
