"""Published reference points for the built-in V3 models.

Each entry is ``(model, resolution, multiplier, madds_millions, params_millions,
pixel1_ms)``. Used to calibrate the shipped latency profile and to check the
cost counter.
"""

V3_REFERENCE = (
    ("v3-large", 224, 1.25, 356, 7.5, 77.0),
    ("v3-large", 224, 1.0, 217, 5.4, 51.2),
    ("v3-large", 224, 0.75, 155, 4.0, 39.8),
    ("v3-large", 224, 0.5, 69, 2.6, 21.7),
    ("v3-large", 224, 0.35, 40, 2.2, 15.1),
    ("v3-large", 256, 1.0, 282, 5.4, 65.6),
    ("v3-large", 192, 1.0, 160, 5.4, 38.0),
    ("v3-large", 160, 1.0, 112, 5.4, 27.8),
    ("v3-large", 128, 1.0, 73, 5.4, 17.8),
    ("v3-large", 96, 1.0, 43, 5.4, 12.5),
    ("v3-small", 224, 1.25, 91, 3.6, 23.6),
    ("v3-small", 224, 1.0, 57, 2.5, 15.8),
    ("v3-small", 224, 0.75, 44, 2.0, 12.8),
    ("v3-small", 224, 0.5, 21, 1.6, 7.7),
    ("v3-small", 224, 0.35, 12, 1.4, 5.7),
    ("v3-small", 256, 1.0, 74, 2.5, 20.0),
    ("v3-small", 160, 1.0, 30, 2.5, 8.6),
    ("v3-small", 128, 1.0, 20, 2.5, 5.8),
    ("v3-small", 96, 1.0, 12, 2.5, 4.4),
)
