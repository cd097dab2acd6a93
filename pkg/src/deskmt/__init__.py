"""Desk-scale neural machine translation workbench.

Subpackages cover the full experimental pipeline: corpus handling and
vocabularies (`corpus`), byte pair encoding (`bpe`), lexical translation
tables and phrase extraction (`lexicon`), the attentional encoder-decoder
(`model`) on a small reverse-mode autodiff core (`autodiff`), annealed
optimizer training (`train`), beam-search and ensemble decoding (`decode`),
evaluation metrics (`evaluation`), and the experiment driver (`pipeline`,
`cli`).
"""

__version__ = "0.1.0"
