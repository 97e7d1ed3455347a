"""
    Semantic ids for items shared between generative search and recommendation.
"""

from .embedding_store import Catalog, EmbeddingMatrix, InteractionLog, QuerySet, load_embeddings, save_embeddings, l2_normalize, align, EmbeddingStoreException
from .fusion import FusionKind, FusionSpec, SvdProjector, fuse_concat, fuse_svd_add, fit_truncated_svd, project_context, FusionException
from .enmf import EnmfModel, train_enmf, item_embeddings, enmf_loss_naive, enmf_loss_efficient, EnmfException
from .quantizer import QuantizerKind, RQCodebooks, ItemCodes, kmeans_fit, rq_fit, rlfq_fit, rq_encode, rq_decode, fit_codebooks, encode_items, QuantizerException
from .id_space import Namespace, Token, SemanticId, TokenVocab, IdAssignment, IdTrie, build_task_specific, build_separate, build_prefix_share, build_trie, IdSpaceException
from .retrieval import DecodingConfig, Context, ContextKind, Scorer, ResidualScorer, RetrievalIndex, beam_search, diverse_beam_search, retrieve_search, retrieve_rec, RetrievalException
from .pipeline import Strategy, QuantizerParams, Dataset, build_strategy, restore_strategy, make_index, PipelineException
from .config import RunConfig, load_config, validate_config, ConfigException

__all__ = ['Catalog', 'EmbeddingMatrix', 'InteractionLog', 'QuerySet', 'load_embeddings', 'save_embeddings', 'l2_normalize', 'align', 'EmbeddingStoreException',
           'FusionKind', 'FusionSpec', 'SvdProjector', 'fuse_concat', 'fuse_svd_add', 'fit_truncated_svd', 'project_context', 'FusionException',
           'EnmfModel', 'train_enmf', 'item_embeddings', 'enmf_loss_naive', 'enmf_loss_efficient', 'EnmfException',
           'QuantizerKind', 'RQCodebooks', 'ItemCodes', 'kmeans_fit', 'rq_fit', 'rlfq_fit', 'rq_encode', 'rq_decode', 'fit_codebooks', 'encode_items', 'QuantizerException',
           'Namespace', 'Token', 'SemanticId', 'TokenVocab', 'IdAssignment', 'IdTrie', 'build_task_specific', 'build_separate', 'build_prefix_share', 'build_trie', 'IdSpaceException',
           'DecodingConfig', 'Context', 'ContextKind', 'Scorer', 'ResidualScorer', 'RetrievalIndex', 'beam_search', 'diverse_beam_search', 'retrieve_search', 'retrieve_rec', 'RetrievalException',
           'Strategy', 'QuantizerParams', 'Dataset', 'build_strategy', 'restore_strategy', 'make_index', 'PipelineException',
           'RunConfig', 'load_config', 'validate_config', 'ConfigException']
