"""Desk-scale toolkit for depth-parameterized transformer language models.

Modules: ``tensor`` (reverse-mode autodiff core), ``bpe`` (tokenizer),
``model`` (the three architecture families and parameter accounting),
``data``/``objectives`` (corpus pipeline and losses), ``optim``/``engine``
(the training recipe), ``cost`` (compute accounting), ``evaluation``
(fine-tuning, metrics and depth sweeps), ``cli`` (command-line harness).
"""

__version__ = "0.1.0"
