"""urbanfix: refine an unreliable GPS fix against geotagged street-view images.

The pipeline prunes a heading-stamped reference database by the fix's
estimated position error and the camera heading, then picks the best
geometric match by ratio-test descriptor matching and RANSAC homography
verification. When the fix is already precise, it is returned untouched.
"""

from .dataset import (
    FilePanoramaProvider,
    ImageRecord,
    Manifest,
    PanoramaSite,
    build_streetview_url,
    discover_panoramas,
    enumerate_headings,
    load_manifest,
    save_manifest,
)
from .features import (
    DescriptorSet,
    Keypoint,
    extract_descriptors,
    load_descriptors,
    load_image,
    normalize_image,
    save_descriptors,
)
from .geodesy import EarthModel, GeoPoint, great_circle_distance, heading_difference
from .gnss import ErrorModel, GpsFix, estimated_position_error, parse_gga
from .matching import (
    Homography,
    MatchConfig,
    MatchPair,
    VerificationResult,
    dlt_homography,
    ransac_homography,
    ratio_match,
    reprojection_error,
    score_candidates,
)
from .pipeline import (
    EvaluationReport,
    LocalizationResult,
    PipelineConfig,
    QueryCase,
    evaluate,
    export_geojson,
    index_dataset,
    locate,
)
from .retrieval import (
    CandidateSet,
    GridIndex,
    RetrievalConfig,
    build_grid_index,
    filter_candidates,
    radius_query,
)
from .synth import SyntheticSpec, generate_synthetic_dataset

__version__ = "0.1.0"
