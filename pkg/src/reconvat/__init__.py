"""Semi-supervised music transcription with spectrogram reconstruction and virtual adversarial training."""

__version__ = "0.1.0"
