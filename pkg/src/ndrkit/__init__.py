"""ndrkit: train and evaluate narrative-driven recommendation models from
review corpora via synthetic query generation.

Pipeline: ingest reviews/items -> select eligible users -> generate synthetic
narrative queries (pluggable provider) -> query-likelihood filtering ->
bi-encoder training -> hard-negative mining -> cross-encoder training ->
two-stage retrieval -> graded-relevance evaluation with significance tests.
"""

from .corpus import (DocSnippet, EligibilityConfig, ItemCatalog, ItemRecord,
                     ReviewDoc, ReviewSet, UserInteractionSet, load_items,
                     load_reviews, sample_prompt_docs, select_eligible_users,
                     sentence_spans)
from .encoder import (CrossEncoderModel, EncoderModel, biencoder_distance,
                      crossencoder_score, embed_text, load_crossencoder,
                      load_encoder, model_fingerprint, save_crossencoder,
                      save_encoder, split_terms, tokenize)
from .evaluation import (MetricCutoffs, MetricReport, Qrels, compute_metrics,
                         paired_ttest, significance_report)
from .qgen import (GenerationResult, PromptTemplate, Provider, ProviderConfig,
                   ProviderError, StubProvider, SyntheticQuery, WeakStubProvider,
                   build_prompt, default_synonyms, default_template,
                   generate_item_queries, generate_queries, grounded_llm_generate,
                   load_template, stub_generate)
from .qlfilter import LMStats, ScoredPair, build_lm_stats, filter_pairs, ql_score
from .retrieval import (DenseIndex, RankedList, RankEntry, bm25_rank, build_index,
                        grounded_llm_rank, load_index, prefilter_candidates,
                        ql_rerank, read_run, rerank_cross, retrieve_topk,
                        save_index, write_run)
from .training import (TrainConfig, TrainingExample, ce_loss_and_grad,
                       margin_loss_and_grad, mine_hard_negatives,
                       sample_random_negatives, train_biencoder,
                       train_crossencoder)

__version__ = "0.1.0"
