"""Joint detection and segmentation decoders (PairNet / TripleNet) on a numpy autodiff core."""
__version__ = "0.1.0"
