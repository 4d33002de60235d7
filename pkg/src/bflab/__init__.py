"""Multi-user MIMO beamforming: reduced WMMSE, zero forcing and a learned
convolutional beamformer trained on WMMSE labels."""
__version__ = "0.1.0"
