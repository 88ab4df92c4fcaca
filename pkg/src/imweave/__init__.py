"""imweave: correlated image groups and synthetic multi-turn instruction data.

Pipeline stages live in their own modules and communicate through
line-delimited record files; see the CLI (``imweave --help``) for the
stage-per-subcommand surface.
"""

from .api import Endpoint
from .bench import (
    Battle,
    BenchExample,
    JudgeVerdict,
    Leaderboard,
    ModelAnswer,
    bootstrap_ci,
    build_leaderboard,
    fit_bradley_terry,
    judge_pair,
    verdicts_to_battles,
)
from .clustering import ClusterAssignment, ClusterParams, dbscan_cluster, hdbscan_cluster
from .corpus import EmbeddingRecord, ImageCaptionPair, fetch_embeddings, parse_corpus
from .datastats import DatasetStats, compute_stats, validate_dataset
from .fusion import (
    FusedEmbedding,
    FusionConfig,
    fuse_embedding,
    import_reduction,
    pairwise_distance,
    reduce_dimensions,
)
from .generation import (
    Conversation,
    Turn,
    assemble_sample,
    chat_complete,
    parse_dialogue,
    render_prompt,
    run_generation_batch,
)
from .grouping import (
    ImageGroup,
    MatchedPair,
    greedy_cluster_match,
    match_score,
    plan_batches,
    random_sample_iteration,
    sampling_distribution,
)
from .templates import TEMPLATES, PromptTemplate, get_template

__version__ = "0.1.0"
