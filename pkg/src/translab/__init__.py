"""Boundary-aware transparent object segmentation (TransLab) with Trans10K tooling."""

__version__ = "0.1.0"

BACKGROUND, THING, STUFF = 0, 1, 2
CLASS_NAMES = ("background", "things", "stuff")
