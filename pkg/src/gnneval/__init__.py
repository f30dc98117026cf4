"""Estimate a frozen node classifier's accuracy on unlabeled graphs.

Pipeline: train a classifier on a labeled graph, perturb its val/test
subgraph into many labeled meta-graphs, describe each one by how its node
embeddings relate to the training graph's (a DiscGraph), then regress the
classifier's accuracy from the DiscGraph with a small GCN.
"""
from .augment import AugmentConfig, MetaGraph, build_meta_set, seed_subgraph
from .baselines import (atc_estimate, atc_fit_threshold, autoeval_g_estimate, autoeval_g_fit, mmd,
                        temperature_calibrate, threshold_estimate)
from .discrepancy import (BindingError, DiscGraph, DiscrepancyBuilder, build_discgraph,
                          build_inference_discgraph, disc_attrs, label_meta, load_discgraph,
                          save_discgraph)
from .evaluator import (EvaluatorConfig, TrainedEvaluator, estimate_accuracy, load_evaluator,
                        save_evaluator, train_evaluator)
from .graphio import (Graph, GraphError, GraphFormatError, Split, generate_sbm, graph_id,
                      load_graph, load_split, random_split, save_graph, save_split)
from .zoo import (ARCHS, ModelConfig, TrainedModel, TrainingError, embed_and_predict, load_model,
                  save_model, train_classifier)

__version__ = "0.1.0"
