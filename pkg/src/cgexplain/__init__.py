"""Cell-graph classification and node-mask explanations."""
from .graph import (CellGraph, GraphConfig, NucleusRecord, build_cell_graph, disjoint_union,
                    extract_subgraph, knn_edges, threshold_edges)
from .model import CgnnConfig, CgnnModel, Prediction, model_forward, predict, train
from .explainer import ExplainerConfig, Explanation, NodeMask, binarize_mask, explain, random_explanation
from .data import SynthSpec, generate_synthetic, normalize_features, parse_dataset
from .metrics import weighted_f1

__version__ = "0.1.0"
