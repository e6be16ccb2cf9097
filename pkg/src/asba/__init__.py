"""Atom- and subgraph-aware bilateral aggregation for molecular property prediction."""
from .fragment import SubgraphVocabulary, decompose, mine_vocabulary
from .gnn import ASBAModel, EncoderConfig, GraphBatch, bilateral_predict
from .molgraph import MolGraph, canonical_code, parse_smiles_subset

__version__ = "0.1.0"
