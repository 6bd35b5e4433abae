"""Self-supervised video-audio-text correspondence learning for ultrasound scans."""

__version__ = "0.1.0"
