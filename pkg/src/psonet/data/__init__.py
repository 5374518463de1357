from .images import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    MODES,
    ImageFormatError,
    RegionalImageSet,
    assemble_region_set,
    denormalize_image,
    four_crop,
    normalize_image,
    read_rgb,
    recompose,
    resize_rgb,
    set_capacity,
    write_rgb,
)
from .manifest import (
    DatasetManifest,
    ImageRecord,
    ManifestError,
    VisitSample,
    load_manifest,
    load_visit,
    load_visits,
    manifest_from_dict,
    split_by_patient,
    visit_key,
    with_split,
)
from .sampling import SamplingWeights, compute_sampling_weights
from .synthetic import SyntheticSpec, SyntheticSpecError, generate_synthetic_dataset
