"""Few-shot cross-subject EEG emotion recognition with cross-view fusion and meta-learned adapters."""

__version__ = "0.1.0"
