"""Cross-camera vehicle re-identification with path proposals.

Stage 1 proposes a visual-spatio-temporal path between two query sightings by
exact max-sum inference over a chain of camera trellises; stage 2 adds an
LSTM score of the proposed path to a learned Siamese pair score.
"""

from .data import (
    Camera,
    Dataset,
    PathCatalog,
    Sighting,
    build_catalog,
    camera_distance,
    load_dataset,
    write_dataset,
)
from .errors import ConfigError, DataError, DivergenceError, PathReidError
from .evaluation import (
    EvalReport,
    RankedResult,
    ajs,
    average_precision,
    cmc_topk,
    jaccard,
    mean_ap,
    rank_queries,
    str_baseline,
)
from .mrf import (
    ChainAssignment,
    PathProposal,
    ProposalEngine,
    TablePotentials,
    batch_propose,
    brute_force_oracle,
    empirical_average,
    max_sum,
    propose,
)
from .nnops import (
    Affine,
    ParamStore,
    adam_step,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    sigmoid,
)
from .pathlstm import (
    PathLstm,
    ProposalSample,
    final_similarity,
    finetune_joint,
    path_score,
    siamese_pair_score,
    train_path_lstm,
)
from .potential import (
    MatrixPotentials,
    PairPotentialNet,
    PairSample,
    compute_normalizers,
    sample_training_pairs,
    st_features,
    train_potential,
)
from .synth import SynthConfig, gen_network, gen_trajectories, generate_dataset, split_dataset

__version__ = "0.1.0"
