"""Unified tensor-based active appearance models."""
from .completion import (MaskedTensor, TuckerPowerCompleter, WeightedCPCompleter,
                         complete_cp_weighted, complete_tucker_power, initialize_missing)
from .dataio import (DatasetManifest, SyntheticSpec, generate_synthetic, load_manifest,
                     make_missing_mask, write_dataset, write_manifest)
from .exceptions import DataFormatError, InvalidArgumentError, NumericalError
from .features import HogSpec, extract_features, extract_features_batch
from .fitting import (CascadeRegressor, InitSpec, fit_image, normalized_error, pt_pt_error,
                      train_cascade)
from .geometry import (AffineParams, ReferenceMesh, build_reference_mesh, procrustes_align,
                       remap_occluded_landmarks, render_texture, warp_to_reference)
from .model import (PCAAAM, UTAAM, SampleGrid, ShapeParams, TextureParams, assemble_tensors,
                    build_pca_aam, build_taam_variation_models, build_utaam, load_model,
                    save_model)
from .pipeline import build_from_samples
from .tensor import TuckerModel, fold, hosvd, mode_n_product, multi_mode_product, unfold

__version__ = "0.1.0"

__all__ = [
    "AffineParams", "CascadeRegressor", "DataFormatError", "DatasetManifest", "HogSpec",
    "InitSpec", "InvalidArgumentError", "MaskedTensor", "NumericalError", "PCAAAM",
    "ReferenceMesh", "SampleGrid", "ShapeParams", "SyntheticSpec", "TextureParams",
    "TuckerModel", "TuckerPowerCompleter", "UTAAM", "WeightedCPCompleter", "assemble_tensors",
    "build_from_samples", "build_pca_aam", "build_reference_mesh", "build_taam_variation_models",
    "build_utaam", "complete_cp_weighted", "complete_tucker_power", "extract_features",
    "extract_features_batch", "fit_image", "fold", "generate_synthetic", "hosvd",
    "initialize_missing", "load_manifest", "load_model", "make_missing_mask", "mode_n_product",
    "multi_mode_product", "normalized_error", "procrustes_align", "pt_pt_error",
    "remap_occluded_landmarks", "render_texture", "save_model", "train_cascade", "unfold",
    "warp_to_reference", "write_dataset", "write_manifest",
]
