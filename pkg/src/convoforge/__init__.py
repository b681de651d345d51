"""Synthetic doctor-patient conversation corpus builder.

Personas -> turn-by-turn dialogues -> per-turn speech -> acoustic scenes ->
grounded SOAP notes -> judge reports and metrics, with every model call behind
a pluggable backend and deterministic mocks for offline runs.
"""

__version__ = "0.1.0"

SAMPLE_RATE = 16_000
