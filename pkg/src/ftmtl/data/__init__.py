from .io import DatasetError, load_dataset, save_dataset
from .preprocess import (
    AUGMENT_OPS,
    FoldSplit,
    apply_ops,
    augment,
    build_training_set,
    crop_breast_region,
    kfold,
    split_per_mass,
)
from .sample import CLASS_INDEX, LABELS, MassAnnotation, Sample, pad_to_multiple, quantize16
from .synthetic import generate_synthetic

__all__ = [
    "AUGMENT_OPS",
    "CLASS_INDEX",
    "DatasetError",
    "FoldSplit",
    "LABELS",
    "MassAnnotation",
    "Sample",
    "apply_ops",
    "augment",
    "build_training_set",
    "crop_breast_region",
    "generate_synthetic",
    "kfold",
    "load_dataset",
    "pad_to_multiple",
    "quantize16",
    "save_dataset",
    "split_per_mass",
]
