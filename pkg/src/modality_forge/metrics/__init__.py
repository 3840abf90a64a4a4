from modality_forge.metrics.embedding import (EmbeddingAnalysis, EmbeddingError, analyze_embeddings,
                                              attribute_silhouette)
from modality_forge.metrics.image_quality import ms_ssim, psnr, ssim
from modality_forge.metrics.report import (METRICS, MetricReport, SubjectMismatchError,
                                           UnknownMetricError, evaluate)
from modality_forge.metrics.segmentation import EmptyMaskError, asd, dice

__all__ = ["EmbeddingAnalysis", "EmbeddingError", "EmptyMaskError", "METRICS", "MetricReport",
           "SubjectMismatchError", "UnknownMetricError", "analyze_embeddings", "asd",
           "attribute_silhouette", "dice", "evaluate", "ms_ssim", "psnr", "ssim"]
