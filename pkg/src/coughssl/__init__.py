"""Semi-supervised relabeling of crowdsourced cough recordings."""

__version__ = "0.1.0"
