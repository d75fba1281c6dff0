"""Run configuration: plain-text `key = value` files with dotted keys."""

import math
import os

from ..renderer import RenderConfig
from ..scene_field import FieldConfig

__all__ = ["RunConfig", "parse_config_text", "CONFIG_SCHEMA"]


def _positive(lo=0.0, hi=math.inf):
    return (lo, hi)


# key -> (type, default, constraint); constraint is an inclusive (lo, hi)
# range for numbers or a set of allowed strings.
CONFIG_SCHEMA = {
    "run.seed": (int, 0, (0, 2 ** 31 - 1)),
    "run.agents": (int, 1, (1, 8)),
    "run.frames": (int, 0, (0, 1_000_000)),
    "run.dataset": (str, "synthetic", {"synthetic", "tum", "replica"}),
    "run.dataset_root": (str, "", None),
    "run.deterministic": (bool, True, None),

    "scene.name": (str, "room", {"room", "sphere_wall"}),
    "scene.frames": (int, 60, (1, 1_000_000)),
    "scene.width": (int, 120, (8, 4096)),
    "scene.height": (int, 90, (8, 4096)),
    "scene.fov_deg": (float, 70.0, (20.0, 150.0)),
    "scene.fps": (float, 10.0, (1e-6, 1000.0)),
    "scene.noise_sigma": (float, 0.0, (0.0, 1.0)),
    "scene.orbit_radius": (float, 1.1, (1e-6, 100.0)),
    "scene.orbit_height": (float, -0.25, (-100.0, 100.0)),
    "scene.overlap_deg": (float, 55.0, (0.0, 360.0)),

    "field.plane_cell_size": (float, 0.24, _positive(1e-4)),
    "field.plane_channels": (int, 32, (1, 512)),
    "field.grid_levels": (int, 16, (1, 32)),
    "field.grid_channels": (int, 2, (1, 16)),
    "field.log2_table_size": (int, 15, (4, 24)),
    "field.grid_base_resolution": (int, 16, (2, 1024)),
    "field.grid_max_voxel_size": (float, 0.02, _positive(1e-5)),
    "field.oneblob_bins": (int, 16, (2, 64)),
    "field.hidden_width": (int, 32, (4, 1024)),
    "field.geo_feature_dim": (int, 15, (1, 256)),
    "field.beta_init": (float, 0.1, _positive(1e-6)),

    "renderer.k_stratified": (int, 32, (1, 512)),
    "renderer.k_surface": (int, 11, (0, 128)),
    "renderer.near": (float, 0.05, _positive(1e-6)),
    "renderer.far": (float, 8.0, _positive(1e-6)),
    "renderer.truncation": (float, 0.06, _positive(1e-6)),
    "renderer.paper_literal_weights": (bool, False, None),
    "renderer.lambda_color": (float, 1.0, (0.0, 1e6)),
    "renderer.lambda_depth": (float, 0.1, (0.0, 1e6)),
    "renderer.lambda_sdf_mid": (float, 200.0, (0.0, 1e6)),
    "renderer.lambda_sdf_tail": (float, 10.0, (0.0, 1e6)),
    "renderer.lambda_free": (float, 1.0, (0.0, 1e6)),

    "mapping.first_frame_iterations": (int, 200, (0, 100000)),
    "mapping.iterations": (int, 10, (0, 100000)),
    "mapping.rays": (int, 4000, (1, 1_000_000)),
    "mapping.lr": (float, 1e-3, _positive(1e-9)),

    "tracking.flow": (str, "oracle", {"oracle", "photometric"}),
    "tracking.oracle_noise": (float, 0.0, (0.0, 10.0)),
    "tracking.keyframe_flow": (float, 4.0, _positive(1e-6)),
    "tracking.dba_iterations": (int, 4, (1, 100)),
    "tracking.window": (int, 5, (2, 64)),
    "tracking.window_dba_iterations": (int, 6, (1, 100)),
    "tracking.depth_prior_weight": (float, 0.05, (0.0, 1e3)),

    "loops.enabled": (bool, True, None),
    "loops.tau_cov": (float, 24.0, _positive(1e-6)),
    "loops.tau_desc": (float, 0.85, (-1.0, 1.0)),
    "loops.r_local": (int, 3, (0, 1000)),
    "loops.r_global": (int, 5, (0, 1000)),
    "loops.n_local": (int, 12, (1, 1000)),
    "loops.pgo_iterations": (int, 25, (1, 1000)),
    "loops.huber": (float, 0.1, _positive(1e-9)),

    "refine.enabled": (bool, True, None),
    "refine.iterations": (int, 40, (0, 10000)),
    "refine.rays": (int, 192, (1, 100000)),
    "refine.lr": (float, 3e-3, _positive(1e-9)),
    "refine.probes": (int, 2, (1, 16)),

    "fusion.enabled": (bool, True, None),
    "fusion.iterations": (int, 300, (0, 100000)),
    "fusion.ray_budget": (int, 1024, (1, 1_000_000)),
    "fusion.eval_rays": (int, 512, (1, 100000)),
    "fusion.lr": (float, 1e-3, _positive(1e-9)),
    "fusion.max_rays": (int, 8192, (1, 10_000_000)),
    "fusion.stride": (int, 4, (1, 64)),
    "fusion.cooldown_keyframes": (int, 1_000_000, (0, 10_000_000)),

    "comms.enabled": (bool, True, None),
    "comms.latency": (float, 0.01, (0.0, 1e6)),
    "comms.bandwidth": (float, 1e7, _positive(1e-3)),

    "mesh.voxel": (float, 0.02, _positive(1e-5)),
    "mesh.bounds_margin": (float, 0.0, (0.0, 100.0)),
    "mesh.export": (bool, False, None),
}

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def parse_config_text(text, source="<config>"):
    """Parse `key = value` lines into a string dict.

    '#' starts a comment (full-line or trailing); blank lines are skipped.

    Raises:
        ValueError: lines without '=' or duplicate keys, with line numbers.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _coerce(key, raw):
    typ, _, constraint = CONFIG_SCHEMA[key]
    if isinstance(raw, str):
        if typ is bool:
            word = raw.lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"config key {key!r}: bad boolean {raw!r}")
            value = _BOOL_WORDS[word]
        else:
            try:
                value = typ(raw)
            except ValueError:
                raise ValueError(
                    f"config key {key!r}: cannot parse {raw!r} as "
                    f"{typ.__name__}") from None
    else:
        if typ is bool:
            value = bool(raw)
        elif typ is int:
            if isinstance(raw, float) and raw != int(raw):
                raise ValueError(f"config key {key!r}: expected integer, "
                                 f"got {raw!r}")
            value = int(raw)
        else:
            value = typ(raw)
    if isinstance(constraint, tuple):
        lo, hi = constraint
        if not lo <= value <= hi:
            raise ValueError(f"config key {key!r}: value {value!r} outside "
                             f"[{lo}, {hi}]")
    elif isinstance(constraint, set):
        if value not in constraint:
            allowed = ", ".join(sorted(constraint))
            raise ValueError(f"config key {key!r}: value {value!r} not one "
                             f"of {{{allowed}}}")
    return value


class RunConfig:
    """Validated run configuration over the dotted-key schema."""

    def __init__(self, overrides=None):
        self._values = {key: default
                        for key, (_, default, _) in CONFIG_SCHEMA.items()}
        if overrides:
            self.update(overrides)

    def update(self, mapping):
        for key, raw in mapping.items():
            if key not in CONFIG_SCHEMA:
                raise ValueError(f"unknown config key {key!r}")
            self._values[key] = _coerce(key, raw)
        self._check_consistency()
        return self

    def _check_consistency(self):
        if self["renderer.far"] <= self["renderer.near"]:
            raise ValueError("renderer.far must exceed renderer.near")
        if self["run.dataset"] != "synthetic" \
                and not self["run.dataset_root"]:
            raise ValueError(
                f"run.dataset = {self['run.dataset']} needs run.dataset_root")

    def __getitem__(self, key):
        if key not in CONFIG_SCHEMA:
            raise KeyError(f"unknown config key {key!r}")
        return self._values[key]

    @classmethod
    def from_text(cls, text, source="<config>"):
        return cls(parse_config_text(text, source=source))

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_text(handle.read(), source=os.fspath(path))

    def to_text(self):
        """Full configuration echo, one `key = value` line per schema key."""
        lines = []
        for key in sorted(CONFIG_SCHEMA):
            value = self._values[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}\n")
        return "".join(lines)

    def field_config(self):
        return FieldConfig(
            plane_cell_size=self["field.plane_cell_size"],
            plane_channels=self["field.plane_channels"],
            grid_levels=self["field.grid_levels"],
            grid_channels=self["field.grid_channels"],
            log2_table_size=self["field.log2_table_size"],
            grid_base_resolution=self["field.grid_base_resolution"],
            grid_max_voxel_size=self["field.grid_max_voxel_size"],
            oneblob_bins=self["field.oneblob_bins"],
            hidden_width=self["field.hidden_width"],
            geo_feature_dim=self["field.geo_feature_dim"],
            beta_init=self["field.beta_init"])

    def render_config(self):
        return RenderConfig(
            k_stratified=self["renderer.k_stratified"],
            k_surface=self["renderer.k_surface"],
            near=self["renderer.near"],
            far=self["renderer.far"],
            truncation=self["renderer.truncation"],
            paper_literal_weights=self["renderer.paper_literal_weights"],
            lambda_color=self["renderer.lambda_color"],
            lambda_depth=self["renderer.lambda_depth"],
            lambda_sdf_mid=self["renderer.lambda_sdf_mid"],
            lambda_sdf_tail=self["renderer.lambda_sdf_tail"],
            lambda_free=self["renderer.lambda_free"])
