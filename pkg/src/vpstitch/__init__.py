"""vpstitch: natural panorama stitching with similarity priors from vanishing points."""

__version__ = "0.1.0"
