from .conformer import (CascadedEncoder, ConformerConfig, ConformerLayer, EncoderOutput, encoder_forward,
                        frame_mask_from_lengths)
from .groups import (block_census, build_prune_groups, encoder_method, factorize_encoder, groups_csv,
                     prunable_census, prunable_layers)
from .transducer import (ContractError, Joint, Predictor, TransducerLattice, TransducerModel, build_lattice,
                         edit_distance, greedy_decode, rnnt_nll, token_error_rate, transducer_loss)

__all__ = [
    "CascadedEncoder", "ConformerConfig", "ConformerLayer", "EncoderOutput", "encoder_forward",
    "frame_mask_from_lengths", "block_census", "build_prune_groups", "encoder_method", "factorize_encoder",
    "groups_csv", "prunable_census", "prunable_layers", "ContractError", "Joint", "Predictor",
    "TransducerLattice", "TransducerModel", "build_lattice", "edit_distance", "greedy_decode", "rnnt_nll",
    "token_error_rate", "transducer_loss",
]
