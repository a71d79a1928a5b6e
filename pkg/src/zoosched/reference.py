"""Built-in reference encodings and measured training-speed data.

``FAMILY_BASELINES`` are classic residual networks written in the encoding
grammar.  ``REFERENCE_MODELS`` are twelve searched networks with per-iteration
training step times (ms, batch 64 at 224 px on one V100) and top-1 accuracies;
they calibrate the analytic step-time proxy and double as a ready-made zoo.
"""

from __future__ import annotations

from dataclasses import dataclass

FAMILY_BASELINES: dict[str, str] = {
    "resnet18": "020-_64_11-21-21-21",
    "resnet34": "020-_64_111-2111-211111-211",
    "resnet50": "10001-_64_411-2111-211111-211",
    "wide_resnet50": "11011-_64_411-2111-211111-211",
}

RESNET50_MACRO = "411-2111-211111-211"
RESNET50_FIRST_CHANNEL = 64


@dataclass(frozen=True)
class ReferenceModel:
    name: str
    encoding: str
    step_time_ms: float
    top1: float  # fraction in [0, 1]


REFERENCE_MODELS: tuple[ReferenceModel, ...] = (
    ReferenceModel("ref-a", "2-_32_2-11-112-1121112", 14.74, 0.6206),
    ReferenceModel("ref-b", "031-_32_1-1-221-11121", 15.78, 0.6692),
    ReferenceModel("ref-c", "011-_32_2-211-2-111122", 26.28, 0.7129),
    ReferenceModel("ref-d", "031-_64_1-1-221-11121", 36.30, 0.7446),
    ReferenceModel("ref-e", "011-_64_21-211-121-11111121", 61.95, 0.7687),
    ReferenceModel("ref-f", "10001-_64_4-111-11122-1111111111111112", 93.04, 0.7880),
    ReferenceModel("ref-g", "211-_64_41-211-121-11111121", 133.97, 0.8041),
    ReferenceModel("ref-h", "10001-_64_4-111111111-211112111112-11111", 193.40, 0.8092),
    ReferenceModel(
        "ref-i",
        "02031-a02_64_111-2111-21111111111111111111111-211",
        265.13,
        0.8138,
    ),
    ReferenceModel(
        "ref-j",
        "211-_64_411-2111-21111111111111111111111-211",
        370.28,
        0.8208,
    ),
    ReferenceModel(
        "ref-k",
        "02031-a02_64_1121-111111111111111111111111111-21111111211111-1",
        505.00,
        0.8242,
    ),
    ReferenceModel(
        "ref-l",
        "23311-a02c12_64_211-2111-21111111111111111111111-211",
        542.52,
        0.8265,
    ),
)

ALL_REFERENCE_ENCODINGS: tuple[str, ...] = tuple(FAMILY_BASELINES.values()) + tuple(
    m.encoding for m in REFERENCE_MODELS
)
