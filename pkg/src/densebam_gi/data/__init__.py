from .dataset import collate, load_inkml_dir, read_cache, split, write_cache
from .ink import InkDocument, InkmlError, parse_inkml, rasterize
from .synthetic import Sample, generate_synthetic
from .vocab import Vocabulary, detokenize, tokenize_latex

__all__ = [
    "InkDocument", "InkmlError", "Sample", "Vocabulary", "collate", "detokenize", "generate_synthetic",
    "load_inkml_dir", "parse_inkml", "rasterize", "read_cache", "split", "tokenize_latex", "write_cache",
]
