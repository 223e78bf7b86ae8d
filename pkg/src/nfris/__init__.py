"""Wideband near-field RIS beamforming: channel model, TTD hybrid precoding,
RIS architectures, an end-to-end learned beamformer and perfect-CSI baselines."""

__version__ = "0.1.0"
