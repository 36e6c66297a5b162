"""Local orchestration of cyber reasoning systems against fuzzing targets.

Kept import-light: ``libcrs`` runs inside CRS containers with only the
standard library available.
"""

__version__ = "0.1.0"
