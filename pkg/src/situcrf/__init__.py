"""Compositional conditional random fields for situation recognition."""
from situcrf.schema import NULL, Lexicon, Situation, load_lexicon, save_lexicon
from situcrf.potentials import ModelParams, ScoreTable, init_model, load_model, save_model

__all__ = ["NULL", "Lexicon", "Situation", "load_lexicon", "save_lexicon",
           "ModelParams", "ScoreTable", "init_model", "load_model", "save_model"]
__version__ = "0.1.0"
