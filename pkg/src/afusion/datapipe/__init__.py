"""Preprocessing, synchronization and window loading."""
from .formats import FormatError, ManifestEntry, parse_annotations, read_manifest, write_manifest
from .logmel import extract_logmel
from .records import (FeatureNorm, TrialRecord, WordSpan, align_words_to_frames, fit_length,
                      load_record, normalize_linguistic, preprocess_trial, save_record)
from .windows import (Window, WindowBatch, assemble_batch, augment_and_normalize, iterate_batches,
                      make_windows, stitch_predictions, window_starts)
