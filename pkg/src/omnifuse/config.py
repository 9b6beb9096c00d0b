"""Configuration resolution for the command-line workflows.

Precedence, lowest to highest: built-in defaults, then a JSON config file,
then environment variables, then command-line flag overrides. The audio
frontend timing parameters are architectural constants and cannot be set
from any of those sources.
"""

import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Optional

from .curation_pipeline import (
    ClientSet,
    CurationConfig,
    make_http_clients,
    make_mock_clients,
)
from .model import ModelDims

# fixed frontend timing: 16 kHz, 25 ms window / 10 ms hop, 128 mels, 3x pool
AUDIO_FIXED = {
    "sample_rate": 16000,
    "window_samples": 400,
    "hop_samples": 160,
    "n_mels": 128,
    "pool_stride": 3,
}

ENV_CONFIG = "OMNIFUSE_CONFIG"
ENV_SEED = "OMNIFUSE_SEED"


@dataclass
class Config:
    # model dimensions
    d_enc: int = 32
    d_model: int = 32
    d_t: int = 32
    d_h: int = 64
    placeholder_len: int = 4
    input_px: int = 64

    # stage knobs; None falls back to the per-stage defaults
    seed: int = 0
    stage_steps: Optional[int] = None
    stage_lr: Optional[float] = None
    samples_per_family: Optional[int] = None

    # curation thresholds
    tau_scene: float = 0.5
    min_scene_len: int = 8
    tau_key: float = 0.15
    min_keyframes: int = 2
    max_keyframe_rate: float = 5.0
    min_height: int = 480
    tau_sim: float = 0.9

    # external model clients
    clients: str = "mock"
    base_url: str = "http://localhost:8080"
    client_timeout: float = 30.0

    # artifact locations
    out_dir: str = "runs"

    def __post_init__(self):
        for name in ("d_enc", "d_model", "d_t", "d_h", "placeholder_len",
                     "input_px"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.clients not in ("mock", "http"):
            raise ValueError(f"clients must be 'mock' or 'http', "
                             f"got {self.clients!r}")

    def model_dims(self) -> ModelDims:
        return ModelDims(d_enc=self.d_enc, d_model=self.d_model, d_t=self.d_t,
                         d_h=self.d_h, placeholder_len=self.placeholder_len,
                         input_px=self.input_px)

    def curation(self) -> CurationConfig:
        return CurationConfig(tau_scene=self.tau_scene,
                              min_scene_len=self.min_scene_len,
                              tau_key=self.tau_key,
                              min_keyframes=self.min_keyframes,
                              max_keyframe_rate=self.max_keyframe_rate,
                              min_height=self.min_height,
                              tau_sim=self.tau_sim,
                              seed=self.seed)

    def stage_overrides(self) -> dict:
        out = {}
        if self.stage_steps is not None:
            out["steps"] = int(self.stage_steps)
        if self.stage_lr is not None:
            out["lr"] = float(self.stage_lr)
        if self.samples_per_family is not None:
            out["data_overrides"] = {
                "samples_per_family": int(self.samples_per_family)}
        return out

    def client_set(self) -> ClientSet:
        if self.clients == "mock":
            return make_mock_clients(seed=self.seed)
        return make_http_clients(self.base_url, timeout=self.client_timeout)

    def resolved(self) -> dict:
        """Full effective configuration, audio constants included, for the
        run log; byte-stable ordering so runs can be diffed."""
        payload = dataclasses.asdict(self)
        payload["audio"] = dict(AUDIO_FIXED)
        return payload

    def resolved_json(self) -> str:
        return json.dumps(self.resolved(), sort_keys=True, indent=2) + "\n"


_FIELD_NAMES = {f.name for f in dataclasses.fields(Config)}


def _merge(data: dict, source: str, into: dict) -> None:
    fixed = sorted(set(data) & set(AUDIO_FIXED))
    if fixed:
        raise ValueError(
            f"{source}: audio parameters are fixed and cannot be overridden: "
            + ", ".join(fixed))
    unknown = sorted(set(data) - _FIELD_NAMES)
    if unknown:
        raise ValueError(f"{source}: unknown config keys: " + ", ".join(unknown))
    into.update(data)


def load_config(path=None, env=None, overrides=None) -> Config:
    """Resolve a Config from file, environment, and explicit overrides.

    `path` wins over the ENV_CONFIG variable for locating the file; `overrides`
    (flag values, already typed) win over everything.
    """
    env = os.environ if env is None else env
    merged: dict = {}

    file_path = path or env.get(ENV_CONFIG)
    if file_path:
        try:
            with open(file_path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ValueError(f"unreadable config file {file_path!r}: {e}") from e
        if not isinstance(data, dict):
            raise ValueError(f"config file {file_path!r} must hold a JSON object")
        _merge(data, f"config file {file_path!r}", merged)

    if ENV_SEED in env:
        try:
            merged["seed"] = int(env[ENV_SEED])
        except ValueError as e:
            raise ValueError(f"{ENV_SEED} must be an integer, "
                             f"got {env[ENV_SEED]!r}") from e

    if overrides:
        _merge({k: v for k, v in overrides.items() if v is not None},
               "flags", merged)

    try:
        return Config(**merged)
    except TypeError as e:
        raise ValueError(f"invalid config: {e}") from e
