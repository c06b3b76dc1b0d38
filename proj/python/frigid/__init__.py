"""Structure elucidation from tandem mass spectra with a masked diffusion model."""

from ._frigid import (
    ChemError,
    CheckpointError,
    Elucidator,
    InputError,
    NumericFailure,
    TokenizerError,
    Vocabulary,
    canonical_smiles,
    check_config,
    default_config,
    fingerprint,
    fingerprint_hex,
    formula_hypotheses,
    match_peaks,
    molecular_formula,
    monoisotopic_mass,
    noise_fingerprint,
    simulate_spectrum,
    synthetic_corpus,
    synthetic_record,
    tanimoto,
    train,
)

__all__ = [
    "ChemError",
    "CheckpointError",
    "Elucidator",
    "InputError",
    "NumericFailure",
    "TokenizerError",
    "Vocabulary",
    "canonical_smiles",
    "check_config",
    "default_config",
    "fingerprint",
    "fingerprint_hex",
    "formula_hypotheses",
    "match_peaks",
    "molecular_formula",
    "monoisotopic_mass",
    "noise_fingerprint",
    "simulate_spectrum",
    "synthetic_corpus",
    "synthetic_record",
    "tanimoto",
    "train",
]
