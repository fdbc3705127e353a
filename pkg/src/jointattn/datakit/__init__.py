"""Dataset ingestion, temporal alignment, triplet sampling and synthetic data."""
from .frames import (DirectoryFrameStore, Frame, MemoryFrameStore, Triplet, load_triplet,
                     preprocess, read_png, write_png)
from .manifest import (ActionSegment, Manifest, ManifestError, StreamRef, VideoPair, align_timestamp,
                       filter_invalid_pairs, load_blacklist, load_manifest)
from .sampling import SamplerConfig, SamplingError, TripletSampler, check_triplet, corresponding_second, sample_triplet
from .synth import PairTruth, SynthConfig, SyntheticSet, generate_synthetic, load_truth

__all__ = [
    "ActionSegment", "DirectoryFrameStore", "Frame", "Manifest", "ManifestError", "MemoryFrameStore",
    "PairTruth", "SamplerConfig", "SamplingError", "StreamRef", "SynthConfig", "SyntheticSet", "Triplet",
    "TripletSampler", "VideoPair", "align_timestamp", "check_triplet", "corresponding_second",
    "filter_invalid_pairs", "generate_synthetic", "load_blacklist", "load_manifest", "load_triplet",
    "load_truth", "preprocess", "read_png", "sample_triplet", "write_png",
]
