"""Backdoor-based black-box model watermarking, the capsulation attack that
defeats naive schemes, the CAScore security metric, and the reverse scheme
that survives filtering (hash-chained labels, Merkle evidence, randomized-order
verification)."""

from .scheme import (SchemeParams, IdentityKey, keygen, encode_chain, hash_r,
                     inverse_trigger_code, label_of, scheme_label, serialize_image,
                     deserialize_image, image_digest, derive_seed)
from .triggers import (TriggerSet, noise_trigger, wonder_trigger, stamp_trigger,
                       stego_trigger, reverse_select, build_trigger_set,
                       trigger_source, BASELINE_SCHEMES, ALL_SCHEMES)
from .evidence import (ChainResult, MerkleTree, EvidenceRecord, chain_labels,
                       build_merkle, merkle_root, ledger_append, ledger_lookup)
from .model import (SyntheticDataset, TrainHyper, TrainableModel, OracleModel,
                    UniformRandomModel, gen_dataset, train, embed_backdoor,
                    oracle_query, accuracy, make_dataset_labeler)
from .attack import (Filter, RuleFilter, BayesFilter, KnnFilter, LogisticFilter,
                     MlpFilter, fit_bayes, fit_classifier, capsulate, fake_label,
                     make_fake_labeler, filter_menu, CapsulatedService, LEARNED_KINDS)
from .metrics import (auc, cascore_bound, CAScoreReport, forgery_prob_exact,
                      binomial_tail_exact, chernoff_bound, ambiguity_montecarlo)
from .protocol import (OwnerState, Verdict, VerificationSession, VerificationTranscript,
                       owner_register, verify_session, forward_verify, oracle_for_owner,
                       scenario_capsulation, scenario_overwrite, ProtocolError)

__version__ = "0.1.0"
