"""Dataset records, manifests, report segmentation, and image preparation."""

from retinavl.data.augment import AugmentationPolicy, augment
from retinavl.data.preprocess import UnusableImageError, preprocess_image
from retinavl.data.records import (
    ClinicalReport,
    DatasetManifest,
    Eye,
    ImageReportPair,
    LabelSchema,
    Laterality,
    ManifestError,
    Sex,
    TrimRule,
    parse_manifest,
    serialize_manifest,
)
from retinavl.data.reports import (
    DEFAULT_KEYWORD_TABLE,
    ReportParts,
    UnusableRecordError,
    load_keyword_table,
    segment_report_by_eye,
)

__all__ = [
    "AugmentationPolicy",
    "ClinicalReport",
    "DatasetManifest",
    "DEFAULT_KEYWORD_TABLE",
    "Eye",
    "ImageReportPair",
    "LabelSchema",
    "Laterality",
    "ManifestError",
    "ReportParts",
    "Sex",
    "TrimRule",
    "UnusableImageError",
    "UnusableRecordError",
    "augment",
    "load_keyword_table",
    "parse_manifest",
    "preprocess_image",
    "segment_report_by_eye",
    "serialize_manifest",
]
