from .io import load_dataset, read_vol, save_dataset, write_vol
from .pairing import SliceTriplet, kfold, make_triplets, slice_index, split_patients
from .phantom import VIEWS, PatientViews, PhantomSpec, generate_cohort, generate_phantom, preprocess
from .volume import Volume3D, center_crop, minmax_normalize, normalize_and_crop, resample_linear

__all__ = [
    "PatientViews",
    "PhantomSpec",
    "SliceTriplet",
    "VIEWS",
    "Volume3D",
    "center_crop",
    "generate_cohort",
    "generate_phantom",
    "kfold",
    "load_dataset",
    "make_triplets",
    "minmax_normalize",
    "normalize_and_crop",
    "preprocess",
    "read_vol",
    "resample_linear",
    "save_dataset",
    "slice_index",
    "split_patients",
    "write_vol",
]
