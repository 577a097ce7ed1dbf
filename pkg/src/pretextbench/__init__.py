"""Multi-view self-supervised pretext objectives for audio, with a linear-probe benchmark."""

__version__ = "0.1.0"
