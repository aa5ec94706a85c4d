"""Server and scenario configuration loading."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .colocation import NoiseSpec
from .errors import ScenarioError
from .geometry import EnvironmentMesh
from .pipeline import ExternalBackend, MockBackend, RetryPolicy
from .privacy import MockDetector, PrivacyPolicy
from .server import CoreSettings, SessionCore
from .sync import ChangePolicy


@dataclass
class ServerConfig:
    session_id: str = "default"
    host: str = "127.0.0.1"
    port: int = 4750
    ws_port: int | None = None
    mesh_path: str | None = None
    corpus_path: str | None = None
    backend_kind: str = "mock"  # mock | external
    backend_script: str | None = None
    backend_accepts_images: bool = True
    consent_timeout_s: float = 60.0
    privacy_levels: dict = field(default_factory=dict)
    privacy_default: str = "insensitive"
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    change_policy: ChangePolicy = field(default_factory=ChangePolicy)
    retry_policy: RetryPolicy = field(default_factory=RetryPolicy)
    prefab_extents: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def load_server_config(source, base_dir: Path | None = None) -> ServerConfig:
    """Build a ServerConfig from a YAML path or an already-parsed mapping."""
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        base = path.parent
    else:
        doc = source or {}
        base = base_dir or Path(".")
    if not isinstance(doc, dict):
        raise ScenarioError("server config must be a mapping")
    backend = doc.get("backend", {}) or {}
    noise = doc.get("noise", {}) or {}
    policy = doc.get("change_policy", {}) or {}
    return ServerConfig(
        session_id=doc.get("session_id", "default"),
        host=doc.get("host", "127.0.0.1"),
        port=int(doc.get("port", 4750)),
        ws_port=int(doc["ws_port"]) if doc.get("ws_port") is not None else None,
        mesh_path=doc.get("mesh"),
        corpus_path=doc.get("corpus"),
        backend_kind=backend.get("kind", "mock"),
        backend_script=backend.get("script"),
        backend_accepts_images=bool(backend.get("accepts_images", True)),
        consent_timeout_s=float(doc.get("consent_timeout_s", 60.0)),
        privacy_levels=doc.get("privacy_levels", {}) or {},
        privacy_default=doc.get("privacy_default", "insensitive"),
        noise=NoiseSpec(
            position_std_m=float(noise.get("position_std_m", 0.002)),
            rotation_std_deg=float(noise.get("rotation_std_deg", 0.1)),
            distance_scale=float(noise.get("distance_scale", 0.1)),
            seed=int(noise.get("seed", 0)),
        ),
        change_policy=ChangePolicy(
            position_threshold_m=float(policy.get("position_threshold_m", 0.005)),
            rotation_threshold_deg=float(policy.get("rotation_threshold_deg", 1.0)),
            scale_threshold=float(policy.get("scale_threshold", 0.01)),
            min_interval_s=float(policy.get("min_interval_s", 1.0 / 60.0)),
        ).validate(),
        prefab_extents={
            k.lower(): tuple(v) for k, v in (doc.get("prefab_extents", {}) or {}).items()
        },
        base_dir=base,
    )


def build_backend(config: ServerConfig):
    if config.backend_kind == "mock":
        script = config.resolve(config.backend_script)
        if script is None:
            raise ScenarioError("mock backend needs a script file")
        return MockBackend.from_file(script, accepts_images=config.backend_accepts_images)
    if config.backend_kind == "external":
        return ExternalBackend(accepts_images=config.backend_accepts_images)
    raise ScenarioError(f"unknown backend kind {config.backend_kind!r}")


def build_core(config: ServerConfig, measure_local_processing: bool = False):
    """Instantiate the session core plus its backend from config."""
    detector = None
    if config.corpus_path is not None:
        detector = MockDetector.from_file(config.resolve(config.corpus_path))
    mesh = None
    if config.mesh_path is not None:
        mesh = EnvironmentMesh.from_file(config.resolve(config.mesh_path))
    if config.privacy_levels:
        policy = PrivacyPolicy.from_mapping(config.privacy_levels, config.privacy_default)
    else:
        policy = PrivacyPolicy()
    backend = build_backend(config)
    settings = CoreSettings(
        session_id=config.session_id,
        consent_timeout_s=config.consent_timeout_s,
        prefab_extents=config.prefab_extents,
        measure_local_processing=measure_local_processing,
        privacy_policy=policy,
    )
    core = SessionCore(
        settings,
        detector=detector,
        mesh=mesh,
        backend_identity=getattr(backend, "identity", "backend"),
        backend_accepts_images=getattr(backend, "accepts_images", True),
    )
    return core, backend
