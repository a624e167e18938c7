"""Retinal arterial blood flow from Doppler holography."""
from .doppler import (
    BroadeningMap,
    MomentMaps,
    SpectralWindowConfig,
    VelocityMap,
    analyze_window,
    differential_broadening,
    estimate_background,
    pca_preview,
    velocity_from_broadening,
)
from .errors import ConfigError, DataError, HflowError, NumericError
from .flow import FlowConfig, FlowResult, fit_poiseuille, quantify_flow, section_volume_rate
from .optics import HologramStack, InterferogramStack, OpticalParams, fresnel_propagate, render_hologram_stack
from .phantom import PhantomSpec, PhantomTruth, VesselSpec, generate_phantom, star_phantom
from .segmentation import SegmentationConfig, SegmentationSet, segment

__version__ = "0.1.0"
