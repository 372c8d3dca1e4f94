from .ops import (
    FILL,
    KINDS,
    MAGNITUDE_RANGES,
    RESCALE_METHODS,
    TransformSpec,
    apply_batch,
    apply_transform,
    as_batch,
)
from .policies import (
    CTA_BINS,
    CTAUGMENT_KINDS,
    CTAUGMENT_PARAMS,
    RANDAUGMENT_KINDS,
    RANDAUGMENT_RANGES,
    CtaState,
    WeakAugConfig,
    bin_value,
    cta_probe_batch,
    cta_sample,
    cta_sample_batch,
    cta_update,
    cutout,
    match_score,
    randaugment_sample,
    randaugment_sample_batch,
    strong_augment,
    strong_augment_batch,
    weak_augment,
    weak_augment_batch,
)
from .ppm import read_pnm, write_pnm
