"""Edge server and client toolkit for co-located multi-user spatial collaboration.

Subsystems: spatial math (:mod:`cospace.geometry`), tag-based frame
alignment (:mod:`cospace.colocation`), ownership-aware state sync
(:mod:`cospace.sync`), privacy-gated frame processing
(:mod:`cospace.privacy`), the two-stage structured model pipeline
(:mod:`cospace.pipeline`), the framed wire protocol
(:mod:`cospace.protocol`), the authoritative session core
(:mod:`cospace.server`), and the simulation/measurement harness
(:mod:`cospace.sim`).
"""

__version__ = "0.1.0"
